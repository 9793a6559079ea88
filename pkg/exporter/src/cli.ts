/**
 * Exporter command line.
 *
 *   export --spec dataset.json --out DIR [--backbone toy-v1] [--seed N]
 *          [--dim N] [--levels N] [--layers 0,1,2] [--truncation POLICY]
 *   serve  [--port N | --stdio] [--backbone toy-v1] [--seed N] [--dim N]
 *          [--levels N]
 */

import * as fs from "fs";
import { AddressInfo } from "net";

import { createBackbone } from "./backbone";
import { DatasetSpec, ExportJob, exportFeatures } from "./export";
import { serveStdio, serveTcp } from "./server";

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (!arg.startsWith("--")) throw new Error(`unexpected argument ${arg}`);
    const name = arg.slice(2);
    if (name === "stdio") {
      flags.set(name, "true");
    } else {
      const value = argv[++i];
      if (value === undefined) throw new Error(`flag --${name} needs a value`);
      flags.set(name, value);
    }
  }
  return flags;
}

async function main(argv: string[]): Promise<number> {
  const [command, ...rest] = argv;
  if (command === "export") {
    const flags = parseFlags(rest);
    const specPath = flags.get("spec");
    const outDir = flags.get("out");
    if (!specPath || !outDir) {
      console.error("usage: export --spec dataset.json --out DIR");
      return 2;
    }
    const spec: DatasetSpec = JSON.parse(fs.readFileSync(specPath, "utf-8"));
    const job: ExportJob = {
      datasetSpec: spec,
      backbone: flags.get("backbone") ?? "toy-v1",
      outDir,
      seed: flags.has("seed") ? Number(flags.get("seed")) : 0,
      dim: flags.has("dim") ? Number(flags.get("dim")) : undefined,
      levels: flags.has("levels") ? Number(flags.get("levels")) : undefined,
      layerSelection: flags.has("layers")
        ? flags.get("layers")!.split(",").map(Number)
        : undefined,
      truncationPolicy: flags.get("truncation"),
    };
    const result = exportFeatures(job);
    console.log(`wrote ${result.bankPath} (${result.records.length} records), ` +
                `${result.lexiconPath} (${result.lexicon.length} concepts), ` +
                `${result.manifestPath}`);
    return 0;
  }
  if (command === "serve") {
    const flags = parseFlags(rest);
    const backbone = createBackbone(flags.get("backbone") ?? "toy-v1", {
      seed: flags.has("seed") ? Number(flags.get("seed")) : 0,
      dim: flags.has("dim") ? Number(flags.get("dim")) : undefined,
      levels: flags.has("levels") ? Number(flags.get("levels")) : undefined,
    });
    if (flags.has("stdio")) {
      serveStdio(backbone);
      return await new Promise<number>(() => undefined); // runs until killed
    }
    const server = await serveTcp(backbone, Number(flags.get("port") ?? 0));
    const address = server.address() as AddressInfo;
    console.log(`listening on ${address.address}:${address.port}`);
    return await new Promise<number>(() => undefined);
  }
  console.error("usage: cli.js <export|serve> [flags]");
  return 2;
}

main(process.argv.slice(2)).then(
  (code) => { if (code !== 0) process.exitCode = code; },
  (err) => { console.error(`error: ${err.message}`); process.exitCode = 1; },
);
