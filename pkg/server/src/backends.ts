import { CosineSchedule } from "./schedule.js";
import { ToyDenoiser } from "./toy.js";
import { readNpy } from "./npy.js";

export interface Backend {
  denoise(z: Float32Array, shape: number[], t: number, prompt: string,
          scale: number): Float32Array;
}

/** Exact optimal predictor for data ~ N(mu, sigma^2 I):
 * eps_hat = sqrt(1-ab) (z - sqrt(ab) mu) / (ab sigma^2 + 1 - ab). */
export class AnalyticBackend implements Backend {
  constructor(private mu: Float32Array, private muShape: number[],
              private sigma: number,
              private schedule = new CosineSchedule()) {
    if (sigma < 0) throw new Error("sigma must be >= 0");
  }

  static fromFile(path: string, sigma: number): AnalyticBackend {
    const { shape, data } = readNpy(path);
    return new AnalyticBackend(data, shape, sigma);
  }

  denoise(z: Float32Array, shape: number[], t: number): Float32Array {
    if (shape.join(",") !== this.muShape.join(",")) {
      throw new Error(`shape ${shape} does not match mu ${this.muShape}`);
    }
    const ab = this.schedule.at(t);
    const root = Math.sqrt(ab);
    const num = Math.sqrt(1 - ab);
    const den = ab * this.sigma * this.sigma + (1 - ab);
    const out = new Float32Array(z.length);
    for (let i = 0; i < z.length; i++) {
      out[i] = (num * (z[i] - root * this.mu[i])) / den;
    }
    return out;
  }
}

export class ToyBackend implements Backend {
  constructor(private model: ToyDenoiser) {}

  static fromFile(path: string): ToyBackend {
    return new ToyBackend(ToyDenoiser.load(path));
  }

  denoise(z: Float32Array, shape: number[], t: number): Float32Array {
    if (shape.length !== 3 || shape[2] !== 3) {
      throw new Error(`toy backend expects (H, W, 3), got ${shape}`);
    }
    return this.model.denoise(z, shape[0], shape[1], t);
  }
}

/**
 * Adapter seam for real text-to-image diffusion models: implement Backend,
 * dispatch on the prompt/scale fields, and register it in main.ts. Bundling
 * an actual model is deliberately out of scope here.
 */
export class AdapterBackend implements Backend {
  denoise(): Float32Array {
    throw new Error("adapter backend is an integration point; plug a real model in");
  }
}
