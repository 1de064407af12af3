/** Minimal NumPy .npy reader/writer for little-endian float32 arrays. */

import { readFileSync, writeFileSync } from "node:fs";

export interface NpyArray {
  shape: number[];
  data: Float32Array;
}

export function readNpy(path: string): NpyArray {
  const buf = readFileSync(path);
  if (buf.subarray(0, 6).toString("latin1") !== "\x93NUMPY") {
    throw new Error(`${path}: not an .npy file`);
  }
  const major = buf.readUInt8(6);
  const headerLen = major >= 2 ? buf.readUInt32LE(8) : buf.readUInt16LE(8);
  const headerStart = major >= 2 ? 12 : 10;
  const header = buf.subarray(headerStart, headerStart + headerLen).toString("latin1");
  const descr = /'descr':\s*'([^']+)'/.exec(header)?.[1];
  if (descr !== "<f4") throw new Error(`${path}: expected '<f4' data, got ${descr}`);
  if (/'fortran_order':\s*True/.test(header)) {
    throw new Error(`${path}: fortran order not supported`);
  }
  const shapeStr = /'shape':\s*\(([^)]*)\)/.exec(header)?.[1] ?? "";
  const shape = shapeStr.split(",").map((s) => s.trim()).filter(Boolean).map(Number);
  const count = shape.reduce((a, b) => a * b, 1);
  const body = buf.subarray(headerStart + headerLen);
  if (body.length < count * 4) throw new Error(`${path}: truncated data`);
  const copy = Buffer.from(body.subarray(0, count * 4));
  return { shape, data: new Float32Array(copy.buffer, copy.byteOffset, count) };
}

export function writeNpy(path: string, shape: number[], data: Float32Array): void {
  let header = `{'descr': '<f4', 'fortran_order': False, 'shape': (${shape.join(", ")}${shape.length === 1 ? "," : ""}), }`;
  const unpadded = 10 + header.length + 1;
  header += " ".repeat((64 - (unpadded % 64)) % 64) + "\n";
  const head = Buffer.alloc(10);
  head.write("\x93NUMPY", 0, "latin1");
  head.writeUInt8(1, 6);
  head.writeUInt8(0, 7);
  head.writeUInt16LE(header.length, 8);
  writeFileSync(path, Buffer.concat([head, Buffer.from(header, "latin1"),
                                     Buffer.from(data.buffer.slice(data.byteOffset, data.byteOffset + data.byteLength))]));
}
