/**
 * Encoder backbones behind a uniform interface.
 *
 * Real pretrained backbones (ViT-B/16, ResNet-50) need weight files that are
 * not obtainable in an offline build, so requesting one fails loudly.  The
 * deterministic "toy-v1" backbone exercises every file-format and protocol
 * contract: text features are content-hashed unit vectors, image features
 * come from synthesized spatial maps that are global-average-pooled per
 * layer, exporter-side, in layer order.
 */

import { contentHash, gaussians, normalize, seededRng } from "./rng";

export interface ImageSource {
  id: string;
  /** H x W x 3 pixel grid in [0, 1]; synthesized from `seed` when absent. */
  pixels?: number[][][];
  seed?: number;
}

export interface ImageFeatures {
  finalFeature: Float64Array;
  levelSummaries: Float64Array[];
}

export interface Backbone {
  readonly name: string;
  readonly dim: number; // shared d_v == d_t embedding width
  readonly channelDims: number[];
  encodeText(text: string): Float64Array;
  encodeImage(image: ImageSource): ImageFeatures;
}

export interface ToyBackboneOptions {
  dim?: number;
  levels?: number;
  seed?: number;
  mapSize?: number;
}

const REAL_BACKBONES = new Set(["ViT-B/16", "RN50", "ResNet-50"]);

export function createBackbone(name: string, opts: ToyBackboneOptions = {}): Backbone {
  if (name === "toy-v1") return new ToyBackbone(opts);
  if (REAL_BACKBONES.has(name)) {
    throw new Error(
      `backbone ${name}: pretrained weights are not obtainable in this ` +
      `environment; use "toy-v1" or provide a weights-backed implementation`);
  }
  throw new Error(`unknown backbone ${name}`);
}

class ToyBackbone implements Backbone {
  readonly name = "toy-v1";
  readonly dim: number;
  readonly channelDims: number[];
  private readonly seed: number;
  private readonly mapSize: number;
  private readonly textMemo = new Map<string, Float64Array>();

  constructor(opts: ToyBackboneOptions) {
    this.dim = opts.dim ?? 32;
    const levels = opts.levels ?? 4;
    this.channelDims = Array.from({ length: levels }, () => this.dim);
    this.seed = opts.seed ?? 0;
    this.mapSize = opts.mapSize ?? 2;
  }

  encodeText(text: string): Float64Array {
    if (!text) throw new Error("cannot encode an empty string");
    const memo = this.textMemo.get(text);
    if (memo) return memo;
    const rng = seededRng("toy-v1", this.seed, "text", text);
    const vec = normalize(gaussians(this.dim, rng));
    this.textMemo.set(text, vec);
    return vec;
  }

  encodeImage(image: ImageSource): ImageFeatures {
    const pixels = image.pixels ?? this.synthesizePixels(image);
    this.validatePixels(image.id, pixels);
    const key = contentHash(pixels);

    const finalFeature = normalize(
      gaussians(this.dim, seededRng("toy-v1", this.seed, "final", key)));

    const levelSummaries = this.channelDims.map((channels, q) => {
      const rng = seededRng("toy-v1", this.seed, "level", q, key);
      const pooled = new Float64Array(channels);
      // spatial map pooled on the spot: mean over mapSize x mapSize cells
      for (let w = 0; w < this.mapSize; w++) {
        for (let h = 0; h < this.mapSize; h++) {
          const cell = gaussians(channels, rng);
          for (let c = 0; c < channels; c++) pooled[c] += cell[c];
        }
      }
      const cells = this.mapSize * this.mapSize;
      for (let c = 0; c < channels; c++) pooled[c] /= cells;
      return pooled;
    });
    return { finalFeature, levelSummaries };
  }

  private synthesizePixels(image: ImageSource): number[][][] {
    const rng = seededRng("toy-v1", this.seed, "pixels", image.seed ?? 0, image.id);
    const side = 8;
    return Array.from({ length: side }, () =>
      Array.from({ length: side }, () =>
        Array.from({ length: 3 }, () => rng())));
  }

  private validatePixels(id: string, pixels: number[][][]): void {
    if (!Array.isArray(pixels) || pixels.length < 1 || pixels[0].length < 1) {
      throw new Error(`image ${id}: pixels must be a non-empty H x W x 3 grid`);
    }
  }
}
