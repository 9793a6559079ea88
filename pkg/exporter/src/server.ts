/**
 * encode_text protocol server: newline-delimited UTF-8 JSON over a TCP
 * socket or stdio.
 *
 * Requests:  {"id": u64, "op": "encode_text", "text": string} | {"op": "info"}
 * Replies:   {"id": u64, "dim": u32, "vec": [f32 values]} | {"error": string}
 * The info reply declares d_t, d_v, q, and channel_dims.
 *
 * Requests are answered strictly in arrival order per connection, each reply
 * carrying its request's id, so pipelined clients can match them up.  A
 * malformed request produces an error reply and the connection stays open.
 */

import * as net from "net";
import * as readline from "readline";

import { Backbone } from "./backbone";

type Reply = Record<string, unknown>;

export function handleRequest(backbone: Backbone, line: string): Reply {
  let msg: any;
  try {
    msg = JSON.parse(line);
  } catch {
    return { error: "malformed request: not valid JSON" };
  }
  if (typeof msg !== "object" || msg === null) {
    return { error: "malformed request: expected an object" };
  }
  const id = msg.id;
  const op = msg.op;
  if (op === "info") {
    const reply: Reply = {
      d_t: backbone.dim,
      d_v: backbone.dim,
      q: backbone.channelDims.length,
      channel_dims: backbone.channelDims,
    };
    if (id !== undefined) reply.id = id;
    return reply;
  }
  if (op === "encode_text") {
    if (typeof msg.text !== "string" || msg.text.length === 0) {
      return { id, error: "encode_text requires a non-empty 'text' string" };
    }
    const vec = backbone.encodeText(msg.text);
    return {
      id,
      dim: vec.length,
      // the wire carries single-precision values, matching the bank format
      vec: Array.from(vec, (v) => Math.fround(v)),
    };
  }
  return { id, error: `unknown op ${JSON.stringify(op)}` };
}

function attach(backbone: Backbone, input: NodeJS.ReadableStream,
                output: NodeJS.WritableStream): void {
  const rl = readline.createInterface({ input, crlfDelay: Infinity });
  rl.on("line", (line) => {
    if (!line.trim()) return;
    output.write(JSON.stringify(handleRequest(backbone, line)) + "\n");
  });
}

export function serveTcp(backbone: Backbone, port: number,
                         host = "127.0.0.1"): Promise<net.Server> {
  const server = net.createServer((socket) => {
    socket.on("error", () => socket.destroy());
    attach(backbone, socket, socket);
  });
  return new Promise((resolve, reject) => {
    server.once("error", reject);
    server.listen(port, host, () => resolve(server));
  });
}

export function serveStdio(backbone: Backbone): void {
  attach(backbone, process.stdin, process.stdout);
}
