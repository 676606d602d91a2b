export { parseCheckpoint, CheckpointError, UnsupportedOpError, encodeF32, decodeF32 } from "./checkpoint.js";
export type { Checkpoint, CheckpointLayer } from "./checkpoint.js";
export { exportCheckpoint } from "./export.js";
export type { QuantGraph, ExportResult } from "./export.js";
export { writeQmdl } from "./qmdl.js";
export type { QmdlTensor, QmdlOp, DType } from "./qmdl.js";
export { chooseQparams, computeMultiplier, requantize, quantizeValue, roundHalfAway } from "./quantize.js";
export { preprocess, runQuantGraph, runOnImage } from "./runtime.js";
export type { RgbImage, ActivationTensor } from "./runtime.js";
export { overlayMask, overlayBatch, scaleNearest, OverlayError } from "./overlay.js";
export type { NormalizedBox, OverlayEntry } from "./overlay.js";
export { makeDetectorCheckpoint, makeClassifierCheckpoint, probeImage, XorShift64Star } from "./fixtures.js";
export { readPngRgb, readPngRgba, writePngRgb, writePngRgba } from "./png.js";
export type { RgbaImage } from "./png.js";
