import { readFileSync, writeFileSync } from 'node:fs';

import { ArrayHandle, expectDtype, expectRank } from './types.js';

export const POINT_FIELDS = 6; // x, y, z, rcs, vx, vy

/** Write an (N, 6) float32 point array as the radar CSV format. Values
 * are serialized with shortest-round-trip decimals, so the native parse
 * recovers the exact float32 values. */
export function writePointsCsv(path: string, points: ArrayHandle): void {
  expectDtype(points, 'f32', 'points');
  expectRank(points, 2, 'points');
  if (points.shape[1] !== POINT_FIELDS) {
    throw new Error(`points must be (N, 6), got [${points.shape}]`);
  }
  const lines = ['x,y,z,rcs,vx,vy'];
  const n = points.shape[0];
  for (let i = 0; i < n; i++) {
    const row: string[] = [];
    for (let j = 0; j < POINT_FIELDS; j++) {
      row.push(points.data[i * POINT_FIELDS + j].toString());
    }
    lines.push(row.join(','));
  }
  writeFileSync(path, lines.join('\n') + '\n');
}

export function writeKv(path: string, entries: Record<string, string | number>): void {
  const lines = Object.keys(entries)
    .sort()
    .map((key) => `${key}=${entries[key]}`);
  writeFileSync(path, lines.join('\n') + '\n');
}

export function readKv(path: string): Record<string, string> {
  const out: Record<string, string> = {};
  for (const raw of readFileSync(path, 'utf8').split('\n')) {
    const line = raw.trim();
    if (!line || line.startsWith('#')) continue;
    const eq = line.indexOf('=');
    if (eq < 0) throw new Error(`${path}: malformed line '${line}'`);
    out[line.slice(0, eq).trim()] = line.slice(eq + 1).trim();
  }
  return out;
}
