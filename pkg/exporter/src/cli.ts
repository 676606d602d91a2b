#!/usr/bin/env node
/** maskedge-exporter: checkpoint conversion and mask-overlay augmentation. */

import * as fs from "node:fs";
import * as path from "node:path";
import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { parseCheckpoint } from "./checkpoint.js";
import { exportCheckpoint } from "./export.js";
import { makeClassifierCheckpoint, makeDetectorCheckpoint } from "./fixtures.js";
import { NormalizedBox, overlayBatch } from "./overlay.js";

function cmdExport(args: { checkpoint: string; out: string }): void {
  const ckpt = parseCheckpoint(fs.readFileSync(args.checkpoint, "utf-8"));
  const { bytes } = exportCheckpoint(ckpt);
  fs.writeFileSync(args.out, bytes);
  console.log(`wrote ${bytes.length} bytes to ${args.out}`);
}

function cmdOverlay(args: { manifest: string; asset: string; outDir: string; split: string }): void {
  const raw = JSON.parse(fs.readFileSync(args.manifest, "utf-8"));
  const base = path.dirname(args.manifest);
  const entries = [];
  for (const e of raw.entries ?? []) {
    for (const b of e.boxes ?? []) {
      entries.push({
        image: path.isAbsolute(e.image) ? e.image : path.join(base, e.image),
        box: [b.ymin, b.xmin, b.ymax, b.xmax] as NormalizedBox,
      });
    }
  }
  const result = overlayBatch(entries, args.asset, args.outDir, args.split);
  console.log(`wrote ${result.outputs.length} composited images; manifest: ${result.manifestPath}`);
}

function cmdMakeCheckpoint(args: { kind: string; seed: number; out: string }): void {
  const ckpt = args.kind === "classifier"
    ? makeClassifierCheckpoint(args.seed)
    : makeDetectorCheckpoint(args.seed);
  fs.writeFileSync(args.out, JSON.stringify(ckpt, null, 1));
  console.log(`wrote ${args.kind} checkpoint to ${args.out}`);
}

export async function main(argv: string[]): Promise<number> {
  try {
    await yargs(argv)
      .scriptName("maskedge-exporter")
      .command(
        "export",
        "convert a training checkpoint into a QMDL model",
        (y) => y
          .option("checkpoint", { type: "string", demandOption: true })
          .option("out", { type: "string", demandOption: true }),
        (a) => cmdExport(a as never),
      )
      .command(
        "overlay",
        "composite a mask asset onto faces from a manifest",
        (y) => y
          .option("manifest", { type: "string", demandOption: true })
          .option("asset", { type: "string", demandOption: true })
          .option("out-dir", { type: "string", demandOption: true })
          .option("split", { type: "string", default: "train" }),
        (a) => cmdOverlay({ manifest: (a as never)["manifest"], asset: (a as never)["asset"],
                            outDir: (a as never)["out-dir"], split: (a as never)["split"] }),
      )
      .command(
        "make-checkpoint",
        "write a seeded test checkpoint",
        (y) => y
          .option("kind", { choices: ["detector", "classifier"] as const, default: "detector" })
          .option("seed", { type: "number", default: 1 })
          .option("out", { type: "string", demandOption: true }),
        (a) => cmdMakeCheckpoint(a as never),
      )
      .demandCommand(1)
      .strict()
      .fail((msg, err) => { throw err ?? new Error(msg); })
      .parseAsync();
    return 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

const isDirectRun = process.argv[1] && import.meta.url.endsWith(path.basename(process.argv[1]));
if (isDirectRun) {
  main(hideBin(process.argv)).then((code) => process.exit(code));
}
