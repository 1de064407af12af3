/**
 * CLI: serve a denoiser backend over the framed TCP protocol, or train the
 * toy denoiser on an .npy stack of renders.
 *
 *   main.js serve --port 7341 --backend analytic --mu mu.npy [--sigma 0]
 *   main.js serve --port 7341 --backend toy --checkpoint toy.ckpt
 *   main.js train --data renders.npy --out toy.ckpt [--epochs 8] [--seed 0]
 */

import { AnalyticBackend, Backend, ToyBackend, AdapterBackend } from "./backends.js";
import { createServer } from "./server.js";
import { DEFAULT_PORT } from "./wire.js";
import { readNpy } from "./npy.js";
import { ToyDenoiser, trainToyDenoiser } from "./toy.js";

function parseArgs(argv: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`malformed argument ${argv[i]}`);
    }
    out.set(argv[i].slice(2), argv[i + 1]);
  }
  return out;
}

function buildBackend(args: Map<string, string>): Backend {
  const kind = args.get("backend") ?? "analytic";
  if (kind === "analytic") {
    const mu = args.get("mu");
    if (!mu) throw new Error("analytic backend needs --mu <image.npy>");
    return AnalyticBackend.fromFile(mu, parseFloat(args.get("sigma") ?? "0"));
  }
  if (kind === "toy") {
    const ck = args.get("checkpoint");
    if (!ck) throw new Error("toy backend needs --checkpoint <toy.ckpt>");
    return ToyBackend.fromFile(ck);
  }
  if (kind === "adapter") return new AdapterBackend();
  throw new Error(`unknown backend ${kind}`);
}

function cmdServe(args: Map<string, string>): void {
  const backend = buildBackend(args);
  const port = parseInt(args.get("port") ?? `${DEFAULT_PORT}`, 10);
  const host = args.get("host") ?? "127.0.0.1";
  const maxPayload = parseInt(args.get("max-payload") ?? `${64 * 1024 * 1024}`, 10);
  createServer(backend, { host, port, maxPayload });
  console.log(`serving ${args.get("backend") ?? "analytic"} backend on ${host}:${port}`);
}

function cmdTrain(args: Map<string, string>): void {
  const dataPath = args.get("data");
  const outPath = args.get("out");
  if (!dataPath || !outPath) throw new Error("train needs --data and --out");
  const { shape, data } = readNpy(dataPath);
  if (shape.length !== 4 || shape[3] !== 3) {
    throw new Error(`expected (K, H, W, 3) image stack, got ${shape}`);
  }
  const [K, H, W] = shape;
  const images: Float32Array[] = [];
  for (let k = 0; k < K; k++) {
    images.push(data.subarray(k * H * W * 3, (k + 1) * H * W * 3));
  }
  const seed = parseInt(args.get("seed") ?? "0", 10);
  const epochs = parseInt(args.get("epochs") ?? "8", 10);
  const model = new ToyDenoiser(seed);
  const report = trainToyDenoiser(model, images, H, W, epochs, seed, 3e-4,
                                  (s) => console.log(s));
  model.save(outPath);
  console.log(`saved ${outPath} (final train ${report.epochLosses.at(-1)?.toFixed(4)}, `
              + `val ${report.valLoss.toFixed(4)})`);
}

const [cmd, ...rest] = process.argv.slice(2);
try {
  if (cmd === "serve") cmdServe(parseArgs(rest));
  else if (cmd === "train") cmdTrain(parseArgs(rest));
  else {
    console.error("usage: main.js serve|train [--flags]");
    process.exit(2);
  }
} catch (e) {
  console.error(`error: ${(e as Error).message}`);
  process.exit(1);
}
