/** Cosine variance-preserving schedule; identical construction to the
 * training client so the analytic oracle agrees across the wire. */

export class CosineSchedule {
  readonly alphaBar: Float64Array;

  constructor(numSteps = 1000, s = 0.008) {
    const ab = new Float64Array(numSteps + 1);
    const f0 = Math.cos((s / (1 + s)) * Math.PI / 2) ** 2;
    let prev = Infinity;
    for (let t = 0; t <= numSteps; t++) {
      const f = Math.cos(((t / numSteps + s) / (1 + s)) * Math.PI / 2) ** 2;
      let v = Math.min(Math.max(f / f0, 1e-6), 1 - 1e-6);
      v = Math.min(v, prev);
      ab[t] = v;
      prev = v;
    }
    this.alphaBar = ab;
  }

  get numSteps(): number {
    return this.alphaBar.length - 1;
  }

  at(t: number): number {
    if (!Number.isInteger(t) || t < 0 || t > this.numSteps) {
      throw new RangeError(`timestep ${t} outside [0, ${this.numSteps}]`);
    }
    return this.alphaBar[t];
  }
}
