/**
 * Toy convolutional noise predictor: three 3x3 conv layers over the noised
 * image plus a noise-level channel, trained with the standard denoising
 * objective ||eps_hat - eps||^2 on a directory of renders. Small enough to
 * train on a CPU in minutes; checkpoints are a versioned binary blob.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { CosineSchedule } from "./schedule.js";

export const TOY_MAGIC = "AFTD";
export const TOY_VERSION = 1;

export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function gaussianPair(rand: () => number): [number, number] {
  let u = 0;
  while (u === 0) u = rand();
  const v = rand();
  const r = Math.sqrt(-2 * Math.log(u));
  return [r * Math.cos(2 * Math.PI * v), r * Math.sin(2 * Math.PI * v)];
}

export function fillGaussian(out: Float32Array, rand: () => number): void {
  for (let i = 0; i < out.length; i += 2) {
    const [a, b] = gaussianPair(rand);
    out[i] = a;
    if (i + 1 < out.length) out[i + 1] = b;
  }
}

interface ConvLayer {
  cin: number;
  cout: number;
  w: Float32Array; // (cout, cin, 3, 3)
  b: Float32Array;
}

function makeConv(cin: number, cout: number, rand: () => number): ConvLayer {
  const w = new Float32Array(cout * cin * 9);
  const bound = 1 / Math.sqrt(cin * 9);
  for (let i = 0; i < w.length; i++) w[i] = (rand() * 2 - 1) * bound;
  return { cin, cout, w, b: new Float32Array(cout) };
}

function convForward(x: Float32Array, H: number, W: number, layer: ConvLayer): Float32Array {
  const { cin, cout, w, b } = layer;
  const out = new Float32Array(H * W * cout);
  for (let y = 0; y < H; y++) {
    for (let xp = 0; xp < W; xp++) {
      const o0 = (y * W + xp) * cout;
      for (let co = 0; co < cout; co++) out[o0 + co] = b[co];
      for (let ky = 0; ky < 3; ky++) {
        const yy = y + ky - 1;
        if (yy < 0 || yy >= H) continue;
        for (let kx = 0; kx < 3; kx++) {
          const xx = xp + kx - 1;
          if (xx < 0 || xx >= W) continue;
          const i0 = (yy * W + xx) * cin;
          for (let ci = 0; ci < cin; ci++) {
            const xv = x[i0 + ci];
            if (xv === 0) continue;
            const w0 = (ci * 3 + ky) * 3 + kx;
            for (let co = 0; co < cout; co++) {
              out[o0 + co] += xv * w[(co * cin * 9) + w0];
            }
          }
        }
      }
    }
  }
  return out;
}

function convBackward(x: Float32Array, dout: Float32Array, H: number, W: number,
                      layer: ConvLayer, dw: Float32Array, db: Float32Array,
                      dx: Float32Array | null): void {
  const { cin, cout, w } = layer;
  for (let y = 0; y < H; y++) {
    for (let xp = 0; xp < W; xp++) {
      const o0 = (y * W + xp) * cout;
      for (let co = 0; co < cout; co++) db[co] += dout[o0 + co];
      for (let ky = 0; ky < 3; ky++) {
        const yy = y + ky - 1;
        if (yy < 0 || yy >= H) continue;
        for (let kx = 0; kx < 3; kx++) {
          const xx = xp + kx - 1;
          if (xx < 0 || xx >= W) continue;
          const i0 = (yy * W + xx) * cin;
          for (let ci = 0; ci < cin; ci++) {
            const xv = x[i0 + ci];
            const w0 = (ci * 3 + ky) * 3 + kx;
            let dxv = 0;
            for (let co = 0; co < cout; co++) {
              const g = dout[o0 + co];
              dw[(co * cin * 9) + w0] += xv * g;
              dxv += w[(co * cin * 9) + w0] * g;
            }
            if (dx) dx[i0 + ci] += dxv;
          }
        }
      }
    }
  }
}

export class ToyDenoiser {
  layers: ConvLayer[];
  schedule: CosineSchedule;
  readonly hidden: number;

  constructor(seed = 0, hidden = 16, schedule = new CosineSchedule()) {
    const rand = mulberry32(seed * 2654435761 + 1);
    this.hidden = hidden;
    this.layers = [makeConv(4, hidden, rand), makeConv(hidden, hidden, rand),
                   makeConv(hidden, 3, rand)];
    this.schedule = schedule;
  }

  /** z channel-last (H, W, 3); returns eps_hat of the same layout. */
  denoise(z: Float32Array, H: number, W: number, t: number): Float32Array {
    return this.forward(z, H, W, t).out;
  }

  private inputWithNoiseChannel(z: Float32Array, H: number, W: number, t: number): Float32Array {
    const level = Math.sqrt(1 - this.schedule.at(t));
    const x = new Float32Array(H * W * 4);
    for (let p = 0; p < H * W; p++) {
      x[p * 4] = z[p * 3];
      x[p * 4 + 1] = z[p * 3 + 1];
      x[p * 4 + 2] = z[p * 3 + 2];
      x[p * 4 + 3] = level;
    }
    return x;
  }

  forward(z: Float32Array, H: number, W: number, t: number) {
    const x0 = this.inputWithNoiseChannel(z, H, W, t);
    const a1 = convForward(x0, H, W, this.layers[0]);
    const h1 = a1.map((v) => (v > 0 ? v : 0));
    const a2 = convForward(h1, H, W, this.layers[1]);
    const h2 = a2.map((v) => (v > 0 ? v : 0));
    const out = convForward(h2, H, W, this.layers[2]);
    return { x0, h1, h2, out };
  }

  backward(cache: { x0: Float32Array; h1: Float32Array; h2: Float32Array },
           dout: Float32Array, H: number, W: number,
           grads: { w: Float32Array[]; b: Float32Array[] }): void {
    const dh2 = new Float32Array(cache.h2.length);
    convBackward(cache.h2, dout, H, W, this.layers[2], grads.w[2], grads.b[2], dh2);
    for (let i = 0; i < dh2.length; i++) if (cache.h2[i] <= 0) dh2[i] = 0;
    const dh1 = new Float32Array(cache.h1.length);
    convBackward(cache.h1, dh2, H, W, this.layers[1], grads.w[1], grads.b[1], dh1);
    for (let i = 0; i < dh1.length; i++) if (cache.h1[i] <= 0) dh1[i] = 0;
    convBackward(cache.x0, dh1, H, W, this.layers[0], grads.w[0], grads.b[0], null);
  }

  zeroGrads() {
    return {
      w: this.layers.map((l) => new Float32Array(l.w.length)),
      b: this.layers.map((l) => new Float32Array(l.b.length)),
    };
  }

  save(path: string): void {
    const meta = JSON.stringify({ hidden: this.hidden, numSteps: this.schedule.numSteps });
    const metaBuf = Buffer.from(meta, "utf-8");
    const blobs: Buffer[] = [];
    for (const l of this.layers) {
      blobs.push(Buffer.from(l.w.buffer.slice(0)), Buffer.from(l.b.buffer.slice(0)));
    }
    const head = Buffer.alloc(12);
    head.write(TOY_MAGIC, 0, "ascii");
    head.writeUInt32LE(TOY_VERSION, 4);
    head.writeUInt32LE(metaBuf.length, 8);
    writeFileSync(path, Buffer.concat([head, metaBuf, ...blobs]));
  }

  static load(path: string): ToyDenoiser {
    const buf = readFileSync(path);
    if (buf.subarray(0, 4).toString("ascii") !== TOY_MAGIC) {
      throw new Error("bad toy checkpoint magic");
    }
    if (buf.readUInt32LE(4) !== TOY_VERSION) throw new Error("bad toy checkpoint version");
    const metaLen = buf.readUInt32LE(8);
    const meta = JSON.parse(buf.subarray(12, 12 + metaLen).toString("utf-8"));
    const model = new ToyDenoiser(0, meta.hidden, new CosineSchedule(meta.numSteps));
    let pos = 12 + metaLen;
    for (const l of model.layers) {
      const wBytes = l.w.length * 4;
      const wCopy = Buffer.from(buf.subarray(pos, pos + wBytes));
      l.w.set(new Float32Array(wCopy.buffer, wCopy.byteOffset, l.w.length));
      pos += wBytes;
      const bBytes = l.b.length * 4;
      const bCopy = Buffer.from(buf.subarray(pos, pos + bBytes));
      l.b.set(new Float32Array(bCopy.buffer, bCopy.byteOffset, l.b.length));
      pos += bBytes;
    }
    if (pos !== buf.length) throw new Error("toy checkpoint has trailing bytes");
    return model;
  }
}

export interface TrainReport {
  epochLosses: number[];
  valLoss: number;
}

export function trainToyDenoiser(model: ToyDenoiser, images: Float32Array[],
                                 H: number, W: number, epochs: number, seed: number,
                                 lr = 3e-4, log?: (s: string) => void): TrainReport {
  if (images.length < 100) throw new Error("need at least 100 training images");
  const rand = mulberry32(seed + 7);
  const nVal = Math.max(8, Math.floor(images.length * 0.1));
  const train = images.slice(0, images.length - nVal);
  const val = images.slice(images.length - nVal);
  const sched = model.schedule;
  const tLo = Math.ceil(0.02 * sched.numSteps);
  const tHi = Math.floor(0.98 * sched.numSteps);

  const m = model.zeroGrads();
  const v = model.zeroGrads();
  let adamT = 0;
  const beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  const noiseBuf = new Float32Array(H * W * 3);
  const zBuf = new Float32Array(H * W * 3);

  function sampleLoss(u: Float32Array, update: boolean): number {
    const t = tLo + Math.floor(rand() * (tHi - tLo + 1));
    const ab = sched.at(t);
    const sig = Math.sqrt(ab);
    const noi = Math.sqrt(1 - ab);
    fillGaussian(noiseBuf, rand);
    for (let i = 0; i < zBuf.length; i++) zBuf[i] = sig * u[i] + noi * noiseBuf[i];
    const cache = model.forward(zBuf, H, W, t);
    let loss = 0;
    const dout = new Float32Array(cache.out.length);
    const invN = 1 / cache.out.length;
    for (let i = 0; i < cache.out.length; i++) {
      const diff = cache.out[i] - noiseBuf[i];
      loss += diff * diff * invN;
      dout[i] = 2 * diff * invN;
    }
    if (update) {
      const g = model.zeroGrads();
      model.backward(cache, dout, H, W, g);
      adamT += 1;
      const c1 = 1 - Math.pow(beta1, adamT);
      const c2 = 1 - Math.pow(beta2, adamT);
      for (let li = 0; li < model.layers.length; li++) {
        const apply = (p: Float32Array, gp: Float32Array, mp: Float32Array, vp: Float32Array) => {
          for (let i = 0; i < p.length; i++) {
            mp[i] = beta1 * mp[i] + (1 - beta1) * gp[i];
            vp[i] = beta2 * vp[i] + (1 - beta2) * gp[i] * gp[i];
            p[i] -= lr * (mp[i] / c1) / (Math.sqrt(vp[i] / c2) + eps);
          }
        };
        apply(model.layers[li].w, g.w[li], m.w[li], v.w[li]);
        apply(model.layers[li].b, g.b[li], m.b[li], v.b[li]);
      }
    }
    return loss;
  }

  const epochLosses: number[] = [];
  for (let e = 0; e < epochs; e++) {
    const order = train.map((_, i) => i);
    for (let i = order.length - 1; i > 0; i--) {
      const j = Math.floor(rand() * (i + 1));
      [order[i], order[j]] = [order[j], order[i]];
    }
    let total = 0;
    for (const i of order) total += sampleLoss(train[i], true);
    epochLosses.push(total / order.length);
    log?.(`epoch ${e + 1}/${epochs}: train ${ (total / order.length).toFixed(4) }`);
  }
  let valLoss = 0;
  for (const u of val) valLoss += sampleLoss(u, false);
  valLoss /= val.length;
  log?.(`validation denoising loss: ${valLoss.toFixed(4)}`);
  return { epochLosses, valLoss };
}
