#!/usr/bin/env node
/**
 * Usage:
 *   export --data <dir> --classes <file> [--template <str>] [--model <id>]
 *          --out-images <path> --out-prompts <path>
 *
 * --model accepts a pretrained checkpoint id (needs @xenova/transformers)
 * or `seeded-mock:<dim>` for a deterministic offline encoder.
 */

import { DEFAULT_MODEL, loadEncoder } from "./encoder";
import { ExportJob, exportImages, exportPrompts } from "./exporter";
import { readClassList } from "./images";

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    if (!key.startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`malformed arguments near '${key}'`);
    }
    flags.set(key.slice(2), argv[i + 1]);
  }
  return flags;
}

function required(flags: Map<string, string>, name: string): string {
  const value = flags.get(name);
  if (value === undefined) {
    throw new Error(`missing required flag --${name}`);
  }
  return value;
}

async function runExport(argv: string[]): Promise<void> {
  const flags = parseFlags(argv);
  const job: ExportJob = {
    dataRoot: required(flags, "data"),
    classNames: readClassList(required(flags, "classes")),
    template: flags.get("template") ?? "a photo of [class c]",
    outImages: required(flags, "out-images"),
    outPrompts: required(flags, "out-prompts"),
  };
  const encoder = await loadEncoder(flags.get("model") ?? DEFAULT_MODEL);
  const log = (msg: string) => console.error(msg);

  const imageStats = await exportImages(job, encoder, log);
  log(
    `wrote ${job.outImages}: ${imageStats.records} records, dim ${encoder.dim}, ` +
      `norm ${imageStats.normMean.toFixed(4)} +- ${imageStats.normStd.toFixed(4)}` +
      (imageStats.skipped.length ? `, skipped ${imageStats.skipped.length}` : ""),
  );
  const promptStats = await exportPrompts(job, encoder);
  log(
    `wrote ${job.outPrompts}: ${promptStats.records} prompts, ` +
      `norm ${promptStats.normMean.toFixed(4)} +- ${promptStats.normStd.toFixed(4)}`,
  );
}

async function main(): Promise<number> {
  const [command, ...rest] = process.argv.slice(2);
  try {
    if (command === "export") {
      await runExport(rest);
      return 0;
    }
    throw new Error(`unknown command '${command ?? ""}'; expected 'export'`);
  } catch (err) {
    console.error(`fedovl-exporter: error: ${(err as Error).message}`);
    return 1;
  }
}

main().then((code) => {
  process.exitCode = code;
});
