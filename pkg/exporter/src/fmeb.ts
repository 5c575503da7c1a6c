/**
 * FMEB v1 binary embedding files.
 *
 * Layout (little-endian): magic "FMEB", u16 version = 1, u32 dim,
 * u32 classCount, per class (u16 nameLen + UTF-8 bytes), u64 recordCount,
 * per record (u32 classIndex + dim float32 values).
 *
 * The writer is the contract here; the reader exists so the test suite can
 * round-trip without leaving this package.
 */

export interface EmbeddingRecord {
  classIndex: number;
  values: Float32Array;
}

export interface EmbeddingFile {
  dim: number;
  classNames: string[];
  records: EmbeddingRecord[];
}

const MAGIC = Buffer.from("FMEB", "ascii");
const VERSION = 1;

export function encodeFmeb(file: EmbeddingFile): Buffer {
  if (file.dim <= 0 || !Number.isInteger(file.dim)) {
    throw new Error(`dimension must be a positive integer, got ${file.dim}`);
  }
  const parts: Buffer[] = [MAGIC];

  const version = Buffer.alloc(2);
  version.writeUInt16LE(VERSION);
  parts.push(version);

  const header = Buffer.alloc(8);
  header.writeUInt32LE(file.dim, 0);
  header.writeUInt32LE(file.classNames.length, 4);
  parts.push(header);

  for (const name of file.classNames) {
    const raw = Buffer.from(name, "utf-8");
    if (raw.length > 0xffff) {
      throw new Error(`class name too long: ${name.slice(0, 32)}...`);
    }
    const len = Buffer.alloc(2);
    len.writeUInt16LE(raw.length);
    parts.push(len, raw);
  }

  const count = Buffer.alloc(8);
  count.writeBigUInt64LE(BigInt(file.records.length));
  parts.push(count);

  for (const record of file.records) {
    if (record.classIndex < 0 || record.classIndex >= file.classNames.length) {
      throw new Error(`record class index ${record.classIndex} out of range`);
    }
    if (record.values.length !== file.dim) {
      throw new Error(
        `record has ${record.values.length} values, expected ${file.dim}`,
      );
    }
    const body = Buffer.alloc(4 + 4 * file.dim);
    body.writeUInt32LE(record.classIndex, 0);
    for (let i = 0; i < file.dim; i++) {
      body.writeFloatLE(record.values[i], 4 + 4 * i);
    }
    parts.push(body);
  }

  return Buffer.concat(parts);
}

export function decodeFmeb(data: Buffer): EmbeddingFile {
  let offset = 0;
  const take = (n: number, what: string): Buffer => {
    if (offset + n > data.length) {
      throw new Error(`file ends inside ${what} (byte offset ${offset})`);
    }
    const chunk = data.subarray(offset, offset + n);
    offset += n;
    return chunk;
  };

  if (!take(4, "magic").equals(MAGIC)) {
    throw new Error("bad magic (byte offset 0)");
  }
  const version = take(2, "version").readUInt16LE();
  if (version !== VERSION) {
    throw new Error(`unsupported version ${version} (byte offset 4)`);
  }
  const dim = take(4, "dimension").readUInt32LE();
  if (dim === 0) {
    throw new Error("dimension must be positive (byte offset 6)");
  }
  const classCount = take(4, "class count").readUInt32LE();
  const classNames: string[] = [];
  for (let i = 0; i < classCount; i++) {
    const len = take(2, `class name length #${i}`).readUInt16LE();
    classNames.push(take(len, `class name #${i}`).toString("utf-8"));
  }
  const recordCount = Number(take(8, "record count").readBigUInt64LE());
  const records: EmbeddingRecord[] = [];
  for (let i = 0; i < recordCount; i++) {
    const classIndex = take(4, `record #${i} class index`).readUInt32LE();
    if (classIndex >= classCount) {
      throw new Error(`record #${i} class index ${classIndex} out of range`);
    }
    const raw = take(4 * dim, `record #${i} values`);
    const values = new Float32Array(dim);
    for (let j = 0; j < dim; j++) {
      values[j] = raw.readFloatLE(4 * j);
    }
    records.push({ classIndex, values });
  }
  if (offset !== data.length) {
    throw new Error(`${data.length - offset} trailing bytes (byte offset ${offset})`);
  }
  return { dim, classNames, records };
}
