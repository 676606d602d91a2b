/**
 * Synthetic mask augmentation: alpha-composite a mask asset onto the lower
 * part of each face box, producing images labeled "mask" plus a dataset
 * manifest in the engine's evaluation schema.
 *
 * Placement: the asset is scaled (nearest neighbor) to the face box width
 * and to 55% of the face box height, anchored to the box bottom.
 * Compositing is integer-exact: out = round((src*a + dst*(255-a)) / 255),
 * so a fully opaque asset replaces the region pixel-for-pixel and a fully
 * transparent one leaves the image untouched.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { readPngRgb, readPngRgba, RgbaImage, writePngRgb } from "./png.js";
import { RgbImage } from "./runtime.js";
import { roundHalfAway } from "./quantize.js";

export type NormalizedBox = [number, number, number, number]; // ymin, xmin, ymax, xmax

export class OverlayError extends Error {}

export function scaleNearest(asset: RgbaImage, width: number, height: number): RgbaImage {
  const data = new Uint8Array(width * height * 4);
  for (let y = 0; y < height; y++) {
    const sy = Math.min(asset.height - 1, Math.floor(((y + 0.5) * asset.height) / height));
    for (let x = 0; x < width; x++) {
      const sx = Math.min(asset.width - 1, Math.floor(((x + 0.5) * asset.width) / width));
      const src = (sy * asset.width + sx) * 4;
      const dst = (y * width + x) * 4;
      data[dst] = asset.data[src];
      data[dst + 1] = asset.data[src + 1];
      data[dst + 2] = asset.data[src + 2];
      data[dst + 3] = asset.data[src + 3];
    }
  }
  return { width, height, data };
}

const MASK_HEIGHT_FRACTION = 0.55;

export function overlayMask(image: RgbImage, faceBox: NormalizedBox, asset: RgbaImage): RgbImage {
  const [ymin, xmin, ymax, xmax] = faceBox;
  if (!(ymin < ymax && xmin < xmax)) {
    throw new OverlayError(`degenerate face box (${faceBox.join(", ")})`);
  }
  const y0 = Math.max(0, Math.round(ymin * image.height));
  const y1 = Math.min(image.height, Math.round(ymax * image.height));
  const x0 = Math.max(0, Math.round(xmin * image.width));
  const x1 = Math.min(image.width, Math.round(xmax * image.width));
  const boxW = x1 - x0;
  const boxH = y1 - y0;
  if (boxW < 1 || boxH < 1) {
    throw new OverlayError(`face box (${faceBox.join(", ")}) leaves no pixels`);
  }
  const maskH = Math.max(1, Math.round(boxH * MASK_HEIGHT_FRACTION));
  const top = y1 - maskH;
  const scaled = scaleNearest(asset, boxW, maskH);

  const out = new Uint8Array(image.data); // copy
  for (let y = 0; y < maskH; y++) {
    for (let x = 0; x < boxW; x++) {
      const src = (y * boxW + x) * 4;
      const a = scaled.data[src + 3];
      if (a === 0) continue;
      const dst = ((top + y) * image.width + (x0 + x)) * 3;
      for (let ch = 0; ch < 3; ch++) {
        const s = scaled.data[src + ch];
        const d = out[dst + ch];
        out[dst + ch] = roundHalfAway((s * a + d * (255 - a)) / 255);
      }
    }
  }
  return { width: image.width, height: image.height, data: out };
}

export interface OverlayEntry {
  image: string; // path relative to the manifest (or absolute)
  box: NormalizedBox;
}

export interface BatchResult {
  manifestPath: string;
  outputs: string[];
}

/** Composite the asset onto every (image, face box) pair, writing PNGs named
 * after the sources plus a manifest labeling every box "mask". */
export function overlayBatch(entries: OverlayEntry[], assetPath: string, outDir: string,
                             split = "train"): BatchResult {
  const asset = readPngRgba(assetPath);
  fs.mkdirSync(outDir, { recursive: true });
  const outputs: string[] = [];
  const manifestEntries = [];
  for (const entry of entries) {
    const image = readPngRgb(entry.image);
    const composited = overlayMask(image, entry.box, asset);
    const name = `mask_${path.basename(entry.image)}`;
    writePngRgb(path.join(outDir, name), composited);
    outputs.push(name);
    manifestEntries.push({
      image: name,
      boxes: [{
        label: "mask",
        ymin: entry.box[0], xmin: entry.box[1],
        ymax: entry.box[2], xmax: entry.box[3],
      }],
    });
  }
  const manifestPath = path.join(outDir, "manifest.json");
  fs.writeFileSync(manifestPath, JSON.stringify({ split, entries: manifestEntries }, null, 2));
  return { manifestPath, outputs };
}
