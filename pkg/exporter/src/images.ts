/**
 * Dataset directory walking and image decoding.
 *
 * A dataset root holds one subdirectory per class name; every .png or
 * .jpg/.jpeg file inside is one sample. Files are visited in sorted order so
 * output is stable across runs.
 */

import * as fs from "fs";
import * as path from "path";

import * as jpeg from "jpeg-js";
import { PNG } from "pngjs";

export interface DecodedImage {
  width: number;
  height: number;
  rgba: Uint8Array;
  sourcePath: string;
}

const EXTENSIONS = new Set([".png", ".jpg", ".jpeg"]);

export function decodeImage(filePath: string): DecodedImage {
  const raw = fs.readFileSync(filePath);
  const ext = path.extname(filePath).toLowerCase();
  if (ext === ".png") {
    const png = PNG.sync.read(raw);
    return { width: png.width, height: png.height, rgba: png.data, sourcePath: filePath };
  }
  if (ext === ".jpg" || ext === ".jpeg") {
    const decoded = jpeg.decode(raw, { useTArray: true, maxMemoryUsageInMB: 512 });
    return {
      width: decoded.width,
      height: decoded.height,
      rgba: decoded.data,
      sourcePath: filePath,
    };
  }
  throw new Error(`unsupported image extension: ${filePath}`);
}

export function listClassImages(dataRoot: string, className: string): string[] {
  const dir = path.join(dataRoot, className);
  let entries: string[];
  try {
    entries = fs.readdirSync(dir);
  } catch (err) {
    throw new Error(`cannot read class directory ${dir}: ${(err as Error).message}`);
  }
  return entries
    .filter((name) => EXTENSIONS.has(path.extname(name).toLowerCase()))
    .sort()
    .map((name) => path.join(dir, name));
}

export function readClassList(classesFile: string): string[] {
  const names = fs
    .readFileSync(classesFile, "utf-8")
    .split("\n")
    .map((line) => line.trim())
    .filter((line) => line.length > 0);
  if (names.length === 0) {
    throw new Error(`class list ${classesFile} is empty`);
  }
  if (new Set(names).size !== names.length) {
    throw new Error(`class list ${classesFile} has duplicate names`);
  }
  return names;
}
