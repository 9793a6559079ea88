/**
 * Batch feature extraction into the engine's bank/lexicon/manifest files.
 *
 * All features are computed and validated before any file is opened, so a
 * dimension problem aborts the job without leaving partial outputs behind.
 */

import * as fs from "fs";
import * as path from "path";

import { Backbone, ImageSource, createBackbone } from "./backbone";
import {
  BankRecord,
  LexiconEntry,
  encodeBank,
  encodeLexicon,
} from "./binfmt";

export const CONCEPT_PROMPT_PREFIX = "The photo is";

export interface DatasetImage extends ImageSource {
  class: number;
  split: "train" | "test";
}

export interface DatasetSpec {
  name: string;
  classes: string[];
  images: DatasetImage[];
  /** explicit concept list, or a count of generated attribute words */
  concepts?: { word: string; category: string }[] | { generate: number };
  shotsPerClass?: number;
}

export interface ExportJob {
  datasetSpec: DatasetSpec;
  backbone: string;
  outDir: string;
  layerSelection?: number[];
  truncationPolicy?: string;
  seed?: number;
  dim?: number;
  levels?: number;
}

export interface ExportResult {
  bankPath: string;
  lexiconPath: string;
  manifestPath: string;
  records: BankRecord[];
  lexicon: LexiconEntry[];
  channelDims: number[];
}

const GENERATED_CATEGORIES = ["color", "material", "size", "shape", "texture"];
const GENERATED_WORDS: Record<string, string[]> = {
  color: ["red", "blue", "green", "yellow", "purple", "orange"],
  material: ["wooden", "metallic", "plastic", "glassy", "stone", "leather"],
  size: ["tiny", "small", "large", "huge", "narrow", "wide"],
  shape: ["round", "square", "oval", "flat", "curved", "pointed"],
  texture: ["striped", "spotted", "smooth", "rough", "glossy", "matte"],
};

export function conceptEntries(spec: DatasetSpec, backbone: Backbone): LexiconEntry[] {
  let words: { word: string; category: string }[];
  if (!spec.concepts) {
    words = [{ word: "plain", category: "other" }];
  } else if (Array.isArray(spec.concepts)) {
    words = spec.concepts;
  } else {
    words = [];
    const counters: Record<string, number> = {};
    while (words.length < spec.concepts.generate) {
      for (const category of GENERATED_CATEGORIES) {
        if (words.length >= spec.concepts.generate) break;
        const index = counters[category] ?? 0;
        counters[category] = index + 1;
        const pool = GENERATED_WORDS[category];
        const word = index < pool.length
          ? pool[index]
          : `${category}${String(index).padStart(4, "0")}`;
        words.push({ word, category });
      }
    }
  }
  return words.map(({ word, category }) => ({
    word,
    category,
    embedding: backbone.encodeText(`${CONCEPT_PROMPT_PREFIX} ${word}`),
  }));
}

export function exportFeatures(job: ExportJob): ExportResult {
  const spec = job.datasetSpec;
  if (spec.classes.length < 2) {
    throw new Error("a dataset needs at least two classes");
  }
  const backbone = createBackbone(job.backbone, {
    dim: job.dim, levels: job.levels, seed: job.seed ?? 0,
  });
  const layers = job.layerSelection ?? backbone.channelDims.map((_, q) => q);
  for (const q of layers) {
    if (q < 0 || q >= backbone.channelDims.length) {
      throw new Error(`layer selection ${q} outside backbone's ${backbone.channelDims.length} levels`);
    }
  }
  const channelDims = layers.map((q) => backbone.channelDims[q]);

  // compute everything first; any failure aborts before files are written
  const records: BankRecord[] = spec.images.map((image) => {
    if (image.class < 0 || image.class >= spec.classes.length) {
      throw new Error(`image ${image.id}: class ${image.class} out of range`);
    }
    const feats = backbone.encodeImage(image);
    return {
      recordId: image.id,
      classId: image.class,
      splitTag: image.split,
      finalFeature: feats.finalFeature,
      levelSummaries: layers.map((q) => feats.levelSummaries[q]),
    };
  });
  const lexicon = conceptEntries(spec, backbone);

  const trainCounts = new Map<number, number>();
  for (const rec of records) {
    if (rec.splitTag === "train") {
      trainCounts.set(rec.classId, (trainCounts.get(rec.classId) ?? 0) + 1);
    }
  }
  const shots = spec.shotsPerClass
    ?? Math.max(1, Math.min(...spec.classes.map((_, c) => trainCounts.get(c) ?? 1)));

  const header = {
    featureDim: backbone.dim,
    textDim: backbone.dim,
    channelDims,
  };
  const bankBytes = encodeBank(header, records);
  const lexiconBytes = encodeLexicon(backbone.dim, lexicon);

  const manifest = {
    bank_path: "bank.cplf",
    channel_dims: channelDims,
    class_names: spec.classes,
    dataset_name: spec.name,
    feature_dim: backbone.dim,
    lexicon_path: "lexicon.cpll",
    level_count: channelDims.length,
    notes: {
      backbone: job.backbone,
      concept_prompt_prefix: CONCEPT_PROMPT_PREFIX,
      encoder: { kind: "remote", endpoint: "" },
      export_seed: job.seed ?? 0,
      layer_selection: layers,
      truncation: job.truncationPolicy ?? "none",
    },
    shots_per_class: shots,
    text_dim: backbone.dim,
  };
  const manifestText = JSON.stringify(manifest, null, 2) + "\n";

  fs.mkdirSync(job.outDir, { recursive: true });
  const bankPath = path.join(job.outDir, "bank.cplf");
  const lexiconPath = path.join(job.outDir, "lexicon.cpll");
  const manifestPath = path.join(job.outDir, "manifest.json");
  fs.writeFileSync(bankPath, bankBytes);
  fs.writeFileSync(bankPath + ".json", manifestText);
  fs.writeFileSync(lexiconPath, lexiconBytes);
  fs.writeFileSync(manifestPath, manifestText);
  return { bankPath, lexiconPath, manifestPath, records, lexicon, channelDims };
}
