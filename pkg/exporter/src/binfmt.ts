/**
 * Little-endian binary containers consumed by the engine.
 *
 * Bank ("CPLF"): magic, version u32=1, d_v u32, d_t u32, Q u32, Q channel
 * dims u32, record count u64, then per record: id (u16 length + UTF-8),
 * class_id u32, split_tag u8 (0 train / 1 test), final feature d_v f32,
 * level summaries C_1..C_Q f32 in layer order.
 *
 * Lexicon ("CPLL"): magic, version u32=1, d_t u32, entry count u64, per
 * entry word (u16 + UTF-8) and category u8, then the I x d_t f32 matrix.
 */

export const BANK_MAGIC = "CPLF";
export const LEXICON_MAGIC = "CPLL";
export const FORMAT_VERSION = 1;

export const SPLIT_CODES: Record<string, number> = { train: 0, test: 1 };
export const CATEGORY_CODES: Record<string, number> = {
  color: 0, material: 1, size: 2, shape: 3, texture: 4, other: 5,
};

export class BinWriter {
  private chunks: Buffer[] = [];

  magic(tag: string): void {
    if (tag.length !== 4) throw new Error("magic must be 4 bytes");
    this.chunks.push(Buffer.from(tag, "ascii"));
  }

  u8(v: number): void {
    const b = Buffer.alloc(1);
    b.writeUInt8(v);
    this.chunks.push(b);
  }

  u16(v: number): void {
    const b = Buffer.alloc(2);
    b.writeUInt16LE(v);
    this.chunks.push(b);
  }

  u32(v: number): void {
    const b = Buffer.alloc(4);
    b.writeUInt32LE(v);
    this.chunks.push(b);
  }

  u64(v: number): void {
    const b = Buffer.alloc(8);
    b.writeBigUInt64LE(BigInt(v));
    this.chunks.push(b);
  }

  string(s: string): void {
    const raw = Buffer.from(s, "utf-8");
    if (raw.length > 0xffff) throw new Error("string too long for u16 prefix");
    this.u16(raw.length);
    this.chunks.push(raw);
  }

  f32Array(values: ArrayLike<number>): void {
    const b = Buffer.alloc(4 * values.length);
    for (let i = 0; i < values.length; i++) b.writeFloatLE(values[i], 4 * i);
    this.chunks.push(b);
  }

  bytes(): Buffer {
    return Buffer.concat(this.chunks);
  }
}

export interface BankRecord {
  recordId: string;
  classId: number;
  splitTag: "train" | "test";
  finalFeature: Float64Array;
  levelSummaries: Float64Array[];
}

export interface BankHeader {
  featureDim: number;
  textDim: number;
  channelDims: number[];
}

export function encodeBank(header: BankHeader, records: BankRecord[]): Buffer {
  for (const rec of records) {
    if (rec.finalFeature.length !== header.featureDim) {
      throw new Error(
        `record ${rec.recordId}: final feature dim ${rec.finalFeature.length} ` +
        `!= header ${header.featureDim}`);
    }
    if (rec.levelSummaries.length !== header.channelDims.length) {
      throw new Error(`record ${rec.recordId}: level count mismatch`);
    }
    rec.levelSummaries.forEach((row, q) => {
      if (row.length !== header.channelDims[q]) {
        throw new Error(
          `record ${rec.recordId}: level ${q} dim ${row.length} ` +
          `!= declared ${header.channelDims[q]}`);
      }
    });
  }
  const w = new BinWriter();
  w.magic(BANK_MAGIC);
  w.u32(FORMAT_VERSION);
  w.u32(header.featureDim);
  w.u32(header.textDim);
  w.u32(header.channelDims.length);
  for (const dim of header.channelDims) w.u32(dim);
  w.u64(records.length);
  for (const rec of records) {
    w.string(rec.recordId);
    w.u32(rec.classId);
    w.u8(SPLIT_CODES[rec.splitTag]);
    w.f32Array(rec.finalFeature);
    for (const row of rec.levelSummaries) w.f32Array(row);
  }
  return w.bytes();
}

export interface LexiconEntry {
  word: string;
  category: string;
  embedding: Float64Array;
}

export function encodeLexicon(textDim: number, entries: LexiconEntry[]): Buffer {
  const seen = new Set<string>();
  for (const entry of entries) {
    if (seen.has(entry.word)) throw new Error(`duplicate concept word ${entry.word}`);
    seen.add(entry.word);
    if (!(entry.category in CATEGORY_CODES)) {
      throw new Error(`unknown concept category ${entry.category}`);
    }
    if (entry.embedding.length !== textDim) {
      throw new Error(`concept ${entry.word}: embedding dim != ${textDim}`);
    }
  }
  const w = new BinWriter();
  w.magic(LEXICON_MAGIC);
  w.u32(FORMAT_VERSION);
  w.u32(textDim);
  w.u64(entries.length);
  for (const entry of entries) {
    w.string(entry.word);
    w.u8(CATEGORY_CODES[entry.category]);
  }
  for (const entry of entries) w.f32Array(entry.embedding);
  return w.bytes();
}

/** Byte size the bank header arithmetic predicts (sanity checks in tests). */
export function expectedBankSize(header: BankHeader, recordIds: string[]): number {
  const headerSize = 4 + 4 + 4 + 4 + 4 + 4 * header.channelDims.length + 8;
  const perVec = 4 * header.featureDim
    + 4 * header.channelDims.reduce((a, b) => a + b, 0);
  let body = 0;
  for (const id of recordIds) {
    body += 2 + Buffer.byteLength(id, "utf-8") + 4 + 1 + perVec;
  }
  return headerSize + body;
}
