import { ArrayHandle, elementCount, wrapArray } from './types.js';

const MAGIC = 0x31474642; // "BFG1" little-endian

/** Serialize a (C, Z, H, W) float32 array into BFG1 bytes. */
export function encodeBfg(handle: ArrayHandle): Buffer {
  if (handle.shape.length !== 4) {
    throw new Error(`BFG1 arrays are rank 4, got shape [${handle.shape}]`);
  }
  const values =
    handle.data instanceof Float32Array
      ? handle.data
      : Float32Array.from(handle.data);
  const out = Buffer.alloc(20 + 4 * values.length);
  out.writeUInt32LE(MAGIC, 0);
  handle.shape.forEach((dim, i) => out.writeUInt32LE(dim, 4 + 4 * i));
  Buffer.from(values.buffer, values.byteOffset, values.byteLength).copy(out, 20);
  return out;
}

/** Parse BFG1 bytes into a handle. The payload is a zero-copy
 * Float32Array view into `blob` whenever the data region is 4-byte
 * aligned; otherwise one documented copy is made. */
export function decodeBfg(blob: Buffer): ArrayHandle {
  if (blob.length < 20 || blob.readUInt32LE(0) !== MAGIC) {
    throw new Error('not a BFG1 payload (bad magic)');
  }
  const shape = [0, 1, 2, 3].map((i) => blob.readUInt32LE(4 + 4 * i));
  const count = elementCount(shape);
  if (blob.length !== 20 + 4 * count) {
    throw new Error(
      `truncated BFG1 payload: expected ${20 + 4 * count} bytes, got ${blob.length}`,
    );
  }
  const start = blob.byteOffset + 20;
  const data =
    start % 4 === 0
      ? new Float32Array(blob.buffer, start, count)
      : new Float32Array(blob.buffer.slice(start, start + 4 * count));
  return wrapArray(data, shape);
}
