/**
 * The export jobs: encode every image under the dataset root into one FMEB
 * file, and every instantiated prompt into another. Embeddings are written
 * exactly as the encoder produced them (no normalization); the consumer
 * normalizes where its own math requires it.
 */

import * as fs from "fs";

import { Encoder } from "./encoder";
import { EmbeddingRecord, encodeFmeb } from "./fmeb";
import { decodeImage, listClassImages } from "./images";

export interface ExportJob {
  dataRoot: string;
  classNames: string[];
  template: string;
  outImages: string;
  outPrompts: string;
}

export const CLASS_PLACEHOLDER = "[class c]";

export function instantiateTemplate(template: string, className: string): string {
  const first = template.indexOf(CLASS_PLACEHOLDER);
  if (first < 0 || template.indexOf(CLASS_PLACEHOLDER, first + 1) >= 0) {
    throw new Error(
      `template must contain exactly one '${CLASS_PLACEHOLDER}' placeholder: ${template}`,
    );
  }
  return template.replace(CLASS_PLACEHOLDER, className);
}

export interface ExportStats {
  records: number;
  skipped: string[];
  normMean: number;
  normStd: number;
}

function normStats(norms: number[]): { normMean: number; normStd: number } {
  if (norms.length === 0) {
    return { normMean: 0, normStd: 0 };
  }
  const mean = norms.reduce((a, b) => a + b, 0) / norms.length;
  const varSum = norms.reduce((a, b) => a + (b - mean) ** 2, 0);
  return { normMean: mean, normStd: Math.sqrt(varSum / norms.length) };
}

export async function exportImages(
  job: ExportJob,
  encoder: Encoder,
  log: (msg: string) => void = () => {},
): Promise<ExportStats> {
  const records: EmbeddingRecord[] = [];
  const skipped: string[] = [];
  const norms: number[] = [];
  for (let classIndex = 0; classIndex < job.classNames.length; classIndex++) {
    const className = job.classNames[classIndex];
    const files = listClassImages(job.dataRoot, className);
    let encoded = 0;
    for (const file of files) {
      let values: Float32Array;
      try {
        values = await encoder.encodeImage(decodeImage(file));
      } catch (err) {
        skipped.push(file);
        log(`skipping unreadable image ${file}: ${(err as Error).message}`);
        continue;
      }
      records.push({ classIndex, values });
      norms.push(Math.hypot(...values));
      encoded++;
    }
    if (encoded === 0) {
      throw new Error(`class '${className}' has no readable images under ${job.dataRoot}`);
    }
  }
  fs.writeFileSync(
    job.outImages,
    encodeFmeb({ dim: encoder.dim, classNames: job.classNames, records }),
  );
  return { records: records.length, skipped, ...normStats(norms) };
}

export async function exportPrompts(
  job: ExportJob,
  encoder: Encoder,
): Promise<ExportStats> {
  const records: EmbeddingRecord[] = [];
  const norms: number[] = [];
  for (let classIndex = 0; classIndex < job.classNames.length; classIndex++) {
    const prompt = instantiateTemplate(job.template, job.classNames[classIndex]);
    const values = await encoder.encodeText(prompt);
    records.push({ classIndex, values });
    norms.push(Math.hypot(...values));
  }
  fs.writeFileSync(
    job.outPrompts,
    encodeFmeb({ dim: encoder.dim, classNames: job.classNames, records }),
  );
  return { records: records.length, skipped: [], ...normStats(norms) };
}
