/**
 * Framed denoiser protocol (little-endian):
 *   magic "DHGD" | version u16 = 1 | hlen u32 | UTF-8 JSON header | payload
 * payload = 4 * prod(header.shape) bytes of row-major channel-last float32,
 * absent when shape is missing or empty.
 *
 * Header key order is fixed (request: t, prompt, scale, shape, dtype;
 * response: status, message, shape) so frames re-serialize byte-exactly.
 */

export const MAGIC = Buffer.from("DHGD", "ascii");
export const VERSION = 1;
export const DEFAULT_PORT = 7341;
const PREFIX_LEN = 4 + 2 + 4;

export class WireError extends Error {}
export class WireVersionError extends WireError {}

export interface RequestHeader {
  t: number;
  prompt: string;
  scale: number;
  shape: number[];
  dtype: string;
}

export interface ResponseHeader {
  status: "ok" | "error";
  message: string;
  shape: number[];
}

function payloadBytes(shape: number[] | undefined): number {
  if (!shape || shape.length === 0) return 0;
  return 4 * shape.reduce((a, b) => a * b, 1);
}

export function encodeFrame(header: object, payload: Buffer = Buffer.alloc(0)): Buffer {
  const hbytes = Buffer.from(JSON.stringify(header), "utf-8");
  const shape = (header as { shape?: number[] }).shape;
  if (payload.length !== payloadBytes(shape)) {
    throw new WireError("payload does not match header shape");
  }
  const prefix = Buffer.alloc(PREFIX_LEN);
  MAGIC.copy(prefix, 0);
  prefix.writeUInt16LE(VERSION, 4);
  prefix.writeUInt32LE(hbytes.length, 6);
  return Buffer.concat([prefix, hbytes, payload]);
}

export function decodeFrame(data: Buffer): { header: any; payload: Buffer } {
  if (data.length < PREFIX_LEN) throw new WireError("frame shorter than prefix");
  if (!data.subarray(0, 4).equals(MAGIC)) {
    throw new WireError(`bad magic ${data.subarray(0, 4).toString("hex")}`);
  }
  const version = data.readUInt16LE(4);
  if (version !== VERSION) throw new WireVersionError(`unsupported version ${version}`);
  const hlen = data.readUInt32LE(6);
  if (data.length < PREFIX_LEN + hlen) throw new WireError("truncated header");
  let header: any;
  try {
    header = JSON.parse(data.subarray(PREFIX_LEN, PREFIX_LEN + hlen).toString("utf-8"));
  } catch (e) {
    throw new WireError(`invalid header: ${e}`);
  }
  const payload = data.subarray(PREFIX_LEN + hlen);
  if (payload.length !== payloadBytes(header.shape)) {
    throw new WireError(`payload length ${payload.length} != expected ${payloadBytes(header.shape)}`);
  }
  return { header, payload: Buffer.from(payload) };
}

export function requestHeader(t: number, prompt: string, scale: number, shape: number[]): RequestHeader {
  return { t, prompt, scale, shape, dtype: "f32le" };
}

export function okHeader(shape: number[]): ResponseHeader {
  return { status: "ok", message: "", shape };
}

export function errorHeader(message: string): ResponseHeader {
  return { status: "error", message, shape: [] };
}

export function payloadFromArray(arr: Float32Array): Buffer {
  return Buffer.from(arr.buffer.slice(arr.byteOffset, arr.byteOffset + arr.byteLength));
}

export function arrayFromPayload(payload: Buffer, shape: number[]): Float32Array {
  const expected = payloadBytes(shape);
  if (payload.length !== expected) {
    throw new WireError(`payload length ${payload.length} != expected ${expected}`);
  }
  const copy = Buffer.from(payload); // aligned copy
  return new Float32Array(copy.buffer, copy.byteOffset, copy.length / 4);
}

/** Incremental frame reader for a socket byte stream. */
export class FrameReader {
  private buf = Buffer.alloc(0);
  constructor(private maxPayload: number = 64 * 1024 * 1024) {}

  /**
   * Feed bytes; returns one decoded frame when complete, null when more
   * bytes are needed. Throws WireError subtypes on malformed input; throws
   * a WireError with oversize=true marker message for payloads over budget.
   */
  push(chunk: Buffer): { header: any; payload: Buffer } | null {
    this.buf = Buffer.concat([this.buf, chunk]);
    if (this.buf.length < PREFIX_LEN) return null;
    if (!this.buf.subarray(0, 4).equals(MAGIC)) throw new WireError("bad magic");
    const version = this.buf.readUInt16LE(4);
    if (version !== VERSION) throw new WireVersionError(`unsupported version ${version}`);
    const hlen = this.buf.readUInt32LE(6);
    if (hlen > 1 << 20) throw new WireError("header too large");
    if (this.buf.length < PREFIX_LEN + hlen) return null;
    let header: any;
    try {
      header = JSON.parse(this.buf.subarray(PREFIX_LEN, PREFIX_LEN + hlen).toString("utf-8"));
    } catch (e) {
      throw new WireError(`invalid header: ${e}`);
    }
    const need = payloadBytes(header.shape);
    if (need > this.maxPayload) throw new WireError("payload too large");
    if (this.buf.length < PREFIX_LEN + hlen + need) return null;
    const payload = Buffer.from(this.buf.subarray(PREFIX_LEN + hlen, PREFIX_LEN + hlen + need));
    this.buf = Buffer.from(this.buf.subarray(PREFIX_LEN + hlen + need));
    return { header, payload };
  }
}
