/**
 * Deterministic randomness for the exporter: every draw is keyed by a string
 * so re-exports with the same seed/config are byte-identical.
 */
import { createHash } from "crypto";

/** sfc32 PRNG seeded from a sha256 digest of the key parts. */
export function seededRng(...key: (string | number)[]): () => number {
  const digest = createHash("sha256").update(key.join("\x1f")).digest();
  let a = digest.readUInt32LE(0);
  let b = digest.readUInt32LE(4);
  let c = digest.readUInt32LE(8);
  let d = digest.readUInt32LE(12);
  return () => {
    a >>>= 0; b >>>= 0; c >>>= 0; d >>>= 0;
    const t = (a + b) | 0;
    a = b ^ (b >>> 9);
    b = (c + (c << 3)) | 0;
    c = (c << 21) | (c >>> 11);
    d = (d + 1) | 0;
    const out = (t + d) | 0;
    c = (c + out) | 0;
    return (out >>> 0) / 4294967296;
  };
}

/** Standard normal draws via Box-Muller on the seeded uniform stream. */
export function gaussians(count: number, rng: () => number): Float64Array {
  const out = new Float64Array(count);
  for (let i = 0; i < count; i += 2) {
    const u1 = 1.0 - rng(); // (0, 1]
    const u2 = rng();
    const r = Math.sqrt(-2.0 * Math.log(u1));
    out[i] = r * Math.cos(2.0 * Math.PI * u2);
    if (i + 1 < count) out[i + 1] = r * Math.sin(2.0 * Math.PI * u2);
  }
  return out;
}

export function normalize(vec: Float64Array): Float64Array {
  let sq = 0.0;
  for (const v of vec) sq += v * v;
  const norm = Math.sqrt(sq);
  if (norm === 0.0) throw new Error("cannot normalize a zero vector");
  const out = new Float64Array(vec.length);
  for (let i = 0; i < vec.length; i++) out[i] = vec[i] / norm;
  return out;
}

export function contentHash(value: unknown): string {
  return createHash("sha256").update(JSON.stringify(value)).digest("hex");
}
