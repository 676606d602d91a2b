/**
 * Affine quantization helpers mirroring the engine's documented semantics:
 * real = scale * (q - zero_point), rounding half away from zero, and the
 * fixed-point multiplier decomposition used for integer requantization.
 * The 64-bit high-half multiply runs in BigInt; JS numbers only carry 53
 * exact integer bits.
 */

export interface QuantParams {
  scale: number;
  zeroPoint: number;
}

export interface FixedPointMultiplier {
  m0: number;
  rightShift: number;
}

export function roundHalfAway(x: number): number {
  return x >= 0 ? Math.floor(x + 0.5) : Math.ceil(x - 0.5);
}

/** Per-tensor uint8 qparams covering [lo, hi], with real zero representable. */
export function chooseQparams(lo: number, hi: number): QuantParams {
  lo = Math.min(lo, 0);
  hi = Math.max(hi, 0);
  if (hi === lo) {
    return { scale: 1.0, zeroPoint: 0 };
  }
  const scale = (hi - lo) / 255;
  const zp = Math.min(255, Math.max(0, roundHalfAway(-lo / scale)));
  return { scale, zeroPoint: zp };
}

export function quantizeValue(x: number, qp: QuantParams): number {
  const q = roundHalfAway(x / qp.scale) + qp.zeroPoint;
  return Math.min(255, Math.max(0, q));
}

export function quantizeArray(values: ArrayLike<number>, qp: QuantParams): Uint8Array {
  const out = new Uint8Array(values.length);
  for (let i = 0; i < values.length; i++) {
    out[i] = quantizeValue(values[i], qp);
  }
  return out;
}

/**
 * Decompose a multiplier in (0, 1) as m0 * 2^-31 * 2^-rightShift with
 * m0 * 2^-31 in [0.5, 1).  Doubling/halving by 2 is exact in IEEE, so this
 * normalization reproduces frexp bit-for-bit.
 */
export function computeMultiplier(m: number): FixedPointMultiplier {
  if (!(m > 0 && m < 1) || !Number.isFinite(m)) {
    throw new RangeError(`multiplier ${m} outside (0, 1)`);
  }
  let mant = m;
  let exp = 0;
  while (mant < 0.5) {
    mant *= 2;
    exp -= 1;
  }
  while (mant >= 1) {
    mant /= 2;
    exp += 1;
  }
  let m0 = Math.floor(mant * 2 ** 31 + 0.5);
  if (m0 === 2 ** 31) {
    m0 = 2 ** 31 - 1;
  }
  return { m0, rightShift: -exp };
}

const INT32_MAX = 2147483647n;
const INT32_MIN = -2147483648n;

/** Saturating high-half multiply then rounding right shift, both rounding
 * half away from zero; returns round(acc * m) as a plain integer. */
export function scaleByMultiplier(acc: number, fpm: FixedPointMultiplier): number {
  const ab = BigInt(acc) * BigInt(fpm.m0);
  const nudge = ab >= 0n ? 1073741824n : -1073741824n;
  const num = ab + nudge;
  let scaled = num >= 0n ? num >> 31n : -((-num) >> 31n);
  if (scaled > INT32_MAX) scaled = INT32_MAX;
  if (scaled < INT32_MIN) scaled = INT32_MIN;
  if (fpm.rightShift > 0) {
    const shift = BigInt(fpm.rightShift);
    const mask = (1n << shift) - 1n;
    const remainder = scaled & mask;
    const threshold = (mask >> 1n) + (scaled < 0n ? 1n : 0n);
    scaled = (scaled >> shift) + (remainder > threshold ? 1n : 0n);
  }
  return Number(scaled);
}

/** clamp(round(acc * m) + zp, actMin, actMax) in pure integer arithmetic. */
export function requantize(acc: number, fpm: FixedPointMultiplier, outZp: number,
                           actMin = 0, actMax = 255): number {
  const q = scaleByMultiplier(acc, fpm) + outZp;
  return Math.min(actMax, Math.max(actMin, q));
}

/** 32-bit accumulator saturation (the engine's release-mode semantics). */
export function fitAccumulator(acc: number): number {
  if (acc > 2147483647) return 2147483647;
  if (acc < -2147483648) return -2147483648;
  return acc;
}
