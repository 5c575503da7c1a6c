/**
 * Encoder backends behind one interface: pixels or prompt text in,
 * fixed-dimension embedding out.
 *
 * `seeded-mock:<dim>` is a fully offline, deterministic encoder (a fixed
 * random projection of pooled pixel intensities; a hash-seeded vector for
 * text). It exists so pipelines and the file contract can be exercised
 * hermetically. Any other model id is treated as a pretrained checkpoint
 * name and loaded through transformers.js, which is an optional install.
 */

import { DecodedImage } from "./images";

export interface Encoder {
  readonly dim: number;
  readonly id: string;
  encodeImage(image: DecodedImage): Promise<Float32Array>;
  encodeText(text: string): Promise<Float32Array>;
}

// splitmix64: tiny, well-mixed, and exactly reproducible with BigInt math.
const MASK64 = (1n << 64n) - 1n;

function splitmix64(state: bigint): [bigint, bigint] {
  let z = (state + 0x9e3779b97f4a7c15n) & MASK64;
  let x = z;
  x = ((x ^ (x >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK64;
  x = ((x ^ (x >> 27n)) * 0x94d049bb133111ebn) & MASK64;
  x = x ^ (x >> 31n);
  return [z, x & MASK64];
}

function hashString(text: string): bigint {
  // FNV-1a over UTF-8 bytes, 64-bit.
  let h = 0xcbf29ce484222325n;
  for (const byte of Buffer.from(text, "utf-8")) {
    h = ((h ^ BigInt(byte)) * 0x100000001b3n) & MASK64;
  }
  return h;
}

/** Deterministic values in [-1, 1) from a 64-bit seed. */
function* uniformStream(seed: bigint): Generator<number> {
  let state = seed;
  for (;;) {
    let out: bigint;
    [state, out] = splitmix64(state);
    yield Number(out >> 11n) / 2 ** 52 - 1.0;
  }
}

const POOLED_SIDE = 16;

/** Mean-pool a decoded image down to a POOLED_SIDE^2 grayscale grid. */
export function pooledIntensities(image: DecodedImage): Float64Array {
  const { width, height, rgba } = image;
  const out = new Float64Array(POOLED_SIDE * POOLED_SIDE);
  for (let by = 0; by < POOLED_SIDE; by++) {
    const y0 = Math.floor((by * height) / POOLED_SIDE);
    const y1 = Math.max(y0 + 1, Math.floor(((by + 1) * height) / POOLED_SIDE));
    for (let bx = 0; bx < POOLED_SIDE; bx++) {
      const x0 = Math.floor((bx * width) / POOLED_SIDE);
      const x1 = Math.max(x0 + 1, Math.floor(((bx + 1) * width) / POOLED_SIDE));
      let sum = 0;
      for (let y = y0; y < y1; y++) {
        for (let x = x0; x < x1; x++) {
          const p = 4 * (y * width + x);
          sum += 0.299 * rgba[p] + 0.587 * rgba[p + 1] + 0.114 * rgba[p + 2];
        }
      }
      out[by * POOLED_SIDE + bx] = sum / ((y1 - y0) * (x1 - x0) * 255);
    }
  }
  return out;
}

class SeededMockEncoder implements Encoder {
  readonly dim: number;
  readonly id: string;
  private readonly projection: Float64Array;

  constructor(dim: number) {
    if (!Number.isInteger(dim) || dim < 2) {
      throw new Error(`seeded-mock dimension must be an integer >= 2, got ${dim}`);
    }
    this.dim = dim;
    this.id = `seeded-mock:${dim}`;
    // One fixed projection row per output coordinate, seeded by (dim, row).
    const n = POOLED_SIDE * POOLED_SIDE;
    this.projection = new Float64Array(dim * n);
    for (let i = 0; i < dim; i++) {
      const stream = uniformStream(hashString(`${this.id}/row/${i}`));
      for (let j = 0; j < n; j++) {
        this.projection[i * n + j] = stream.next().value / Math.sqrt(n);
      }
    }
  }

  async encodeImage(image: DecodedImage): Promise<Float32Array> {
    const features = pooledIntensities(image);
    const n = features.length;
    let mean = 0;
    for (let j = 0; j < n; j++) mean += features[j];
    mean /= n;
    const out = new Float32Array(this.dim);
    for (let i = 0; i < this.dim; i++) {
      let acc = 0;
      for (let j = 0; j < n; j++) {
        acc += this.projection[i * n + j] * (features[j] - mean);
      }
      out[i] = acc;
    }
    return out;
  }

  async encodeText(text: string): Promise<Float32Array> {
    const stream = uniformStream(hashString(`${this.id}/text/${text}`));
    const out = new Float32Array(this.dim);
    for (let i = 0; i < this.dim; i++) {
      out[i] = stream.next().value;
    }
    return out;
  }
}

class TransformersEncoder implements Encoder {
  readonly dim: number;
  readonly id: string;
  private readonly pipe: { image: any; text: any };

  private constructor(id: string, dim: number, pipe: { image: any; text: any }) {
    this.id = id;
    this.dim = dim;
    this.pipe = pipe;
  }

  static async load(modelId: string): Promise<TransformersEncoder> {
    let transformers: any;
    try {
      transformers = await import("@xenova/transformers" as string);
    } catch {
      throw new Error(
        `model '${modelId}' needs the optional @xenova/transformers package ` +
          `(npm install @xenova/transformers); for an offline run use ` +
          `--model seeded-mock:<dim>`,
      );
    }
    const image = await transformers.pipeline("image-feature-extraction", modelId);
    const text = await transformers.pipeline("feature-extraction", modelId);
    const probe = await text("probe", { pooling: "mean" });
    return new TransformersEncoder(modelId, probe.data.length, { image, text });
  }

  async encodeImage(image: DecodedImage): Promise<Float32Array> {
    const result = await this.pipe.image(image.sourcePath);
    return Float32Array.from(result.data);
  }

  async encodeText(text: string): Promise<Float32Array> {
    const result = await this.pipe.text(text, { pooling: "mean" });
    return Float32Array.from(result.data);
  }
}

export const DEFAULT_MODEL = "Xenova/clip-vit-large-patch14-336";

export async function loadEncoder(modelId: string): Promise<Encoder> {
  const mock = modelId.match(/^seeded-mock:(\d+)$/);
  if (mock) {
    return new SeededMockEncoder(parseInt(mock[1], 10));
  }
  return TransformersEncoder.load(modelId);
}
