/** PNG helpers over pngjs: RGB images for faces, RGBA for mask assets. */

import * as fs from "node:fs";
import { PNG } from "pngjs";

import { RgbImage } from "./runtime.js";

export interface RgbaImage {
  width: number;
  height: number;
  data: Uint8Array; // RGBA, row-major
}

export function readPngRgb(path: string): RgbImage {
  const png = PNG.sync.read(fs.readFileSync(path));
  const data = new Uint8Array(png.width * png.height * 3);
  for (let i = 0; i < png.width * png.height; i++) {
    data[i * 3] = png.data[i * 4];
    data[i * 3 + 1] = png.data[i * 4 + 1];
    data[i * 3 + 2] = png.data[i * 4 + 2];
  }
  return { width: png.width, height: png.height, data };
}

export function readPngRgba(path: string): RgbaImage {
  const png = PNG.sync.read(fs.readFileSync(path));
  return { width: png.width, height: png.height, data: new Uint8Array(png.data) };
}

export function writePngRgb(path: string, image: RgbImage): void {
  const png = new PNG({ width: image.width, height: image.height });
  for (let i = 0; i < image.width * image.height; i++) {
    png.data[i * 4] = image.data[i * 3];
    png.data[i * 4 + 1] = image.data[i * 3 + 1];
    png.data[i * 4 + 2] = image.data[i * 3 + 2];
    png.data[i * 4 + 3] = 255;
  }
  fs.writeFileSync(path, PNG.sync.write(png));
}

export function writePngRgba(path: string, image: RgbaImage): void {
  const png = new PNG({ width: image.width, height: image.height });
  Buffer.from(image.data).copy(png.data);
  fs.writeFileSync(path, PNG.sync.write(png));
}
