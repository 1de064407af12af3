import net from "node:net";
import { Backend } from "./backends.js";
import {
  FrameReader, WireError, WireVersionError, arrayFromPayload, encodeFrame,
  errorHeader, okHeader, payloadFromArray,
} from "./wire.js";

export interface ServerConfig {
  host: string;
  port: number;
  maxPayload: number;
}

/**
 * One worker per connection, one request in flight at a time. Protocol
 * errors that keep the stream parseable are answered with error frames;
 * malformed framing (bad magic/version/header) closes the connection.
 */
export function createServer(backend: Backend, config: ServerConfig): net.Server {
  const server = net.createServer((socket) => {
    const reader = new FrameReader(config.maxPayload);
    socket.on("data", (chunk) => {
      let frame;
      try {
        frame = reader.push(chunk);
      } catch (e) {
        if (e instanceof WireError && (e as Error).message === "payload too large") {
          socket.write(encodeFrame(errorHeader("payload too large")));
          socket.end();
          return;
        }
        if (e instanceof WireVersionError) {
          socket.write(encodeFrame(errorHeader(`version mismatch: ${(e as Error).message}`)));
        }
        socket.destroy();
        return;
      }
      if (!frame) return;
      const { header, payload } = frame;
      try {
        const shape: number[] = header.shape ?? [];
        const z = arrayFromPayload(payload, shape);
        const epsHat = backend.denoise(z, shape, header.t, header.prompt ?? "",
                                       header.scale ?? 1.0);
        if (epsHat.length !== z.length) {
          throw new Error("backend returned wrong number of values");
        }
        socket.write(encodeFrame(okHeader(shape), payloadFromArray(epsHat)));
      } catch (e) {
        socket.write(encodeFrame(errorHeader(`${(e as Error).message}`)));
      }
    });
    socket.on("error", () => socket.destroy());
  });
  server.listen(config.port, config.host);
  return server;
}
