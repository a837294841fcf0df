/** Typed-array interop for the radarfuse pipeline.
 *
 * Each bound call round-trips through the native CLI using its public
 * file formats (radar CSV in, BFG1 grids out), so results are
 * bit-identical to native invocations on the same inputs. Only the
 * inference-path operations are bound; training stays native.
 */

import { readFileSync, writeFileSync } from 'node:fs';
import { join } from 'node:path';

import { decodeBfg, encodeBfg } from './bfg.js';
import { readKv, writeKv, writePointsCsv } from './files.js';
import { runCli, withScratchDir } from './runner.js';
import { ArrayHandle, expectDtype, expectRank, wrapArray } from './types.js';

export { decodeBfg, encodeBfg } from './bfg.js';
export { cliCommand, runCli } from './runner.js';
export type { ArrayHandle, DataArray, Dtype } from './types.js';
export { unwrapArray, wrapArray } from './types.js';

export const VERSION = '0.1.0';

export interface GridConfig {
  xMin: number;
  xMax: number;
  yMin: number;
  yMax: number;
  cellSize: number;
}

export interface DensifierConfig {
  sigmaBase: number;
  rcsRef: number;
  rcsGain: number;
  sigmaMin: number;
  sigmaMax: number;
  windowRadius: number;
}

export interface EncoderOptions {
  channels?: number;
  hidden?: number;
}

export interface MiouReport {
  perClassIou: Record<number, number>;
  miou: number;
  miouDynamic: number;
  intersections: Record<number, number>;
  unions: Record<number, number>;
}

/** Version string reported by the native CLI. */
export function nativeVersion(): string {
  return runCli(['--version']).trim();
}

function gridKv(grid: GridConfig): Record<string, number> {
  return {
    'grid.x_min': grid.xMin,
    'grid.x_max': grid.xMax,
    'grid.y_min': grid.yMin,
    'grid.y_max': grid.yMax,
    'grid.cell_size': grid.cellSize,
  };
}

function encoderArgs(options?: EncoderOptions): string[] {
  const args: string[] = [];
  if (options?.channels !== undefined) args.push('--channels', String(options.channels));
  if (options?.hidden !== undefined) args.push('--hidden', String(options.hidden));
  return args;
}

function pointStage(
  subcommand: 'pillarize' | 'densify',
  points: ArrayHandle,
  grid: GridConfig,
  dens?: DensifierConfig,
  options?: EncoderOptions,
): ArrayHandle {
  expectDtype(points, 'f32', 'points');
  expectRank(points, 2, 'points');
  return withScratchDir((dir) => {
    const csv = join(dir, 'points.csv');
    const gridCfg = join(dir, 'grid.cfg');
    const out = join(dir, 'out.bfg');
    writePointsCsv(csv, points);
    writeKv(gridCfg, gridKv(grid));
    const args = [subcommand, '--points', csv, '--grid-config', gridCfg,
                  '--out', out, ...encoderArgs(options)];
    if (dens) {
      const densCfg = join(dir, 'dens.cfg');
      writeKv(densCfg, {
        sigma_base: dens.sigmaBase,
        rcs_ref: dens.rcsRef,
        rcs_gain: dens.rcsGain,
        sigma_min: dens.sigmaMin,
        sigma_max: dens.sigmaMax,
        window_radius: dens.windowRadius,
      });
      args.push('--densifier-config', densCfg);
    }
    runCli(args);
    return decodeBfg(readFileSync(out));
  });
}

/** Points (N, 6) -> pillar feature grid (C, 1, H, W), fixed encoder seed. */
export function pillarize(
  points: ArrayHandle,
  grid: GridConfig,
  options?: EncoderOptions,
): ArrayHandle {
  return pointStage('pillarize', points, grid, undefined, options);
}

/** Points (N, 6) -> pillarized and Gaussian-densified grid (C, 1, H, W). */
export function densify(
  points: ArrayHandle,
  grid: GridConfig,
  dens: DensifierConfig,
  options?: EncoderOptions,
): ArrayHandle {
  return pointStage('densify', points, grid, dens, options);
}

/** Channel-amplify a radar BEV grid (C, 1, H, W) with trained parameters. */
export function amplify(grid: ArrayHandle, checkpointPath: string): ArrayHandle {
  expectDtype(grid, 'f32', 'grid');
  expectRank(grid, 4, 'grid');
  return withScratchDir((dir) => {
    const src = join(dir, 'in.bfg');
    const out = join(dir, 'out.bfg');
    writeFileSync(src, encodeBfg(grid));
    runCli(['amplify', '--in', src, '--ckpt', checkpointPath, '--out', out]);
    return decodeBfg(readFileSync(out));
  });
}

/** Fuse a camera volume (C_I, Z, H, W) with a radar BEV grid (C_R, 1, H, W). */
export function crossModalFuse(
  cameraVolume: ArrayHandle,
  radarBev: ArrayHandle,
  checkpointPath: string,
): ArrayHandle {
  expectDtype(cameraVolume, 'f32', 'camera volume');
  expectRank(cameraVolume, 4, 'camera volume');
  expectDtype(radarBev, 'f32', 'radar BEV');
  expectRank(radarBev, 4, 'radar BEV');
  return withScratchDir((dir) => {
    const img = join(dir, 'img.bfg');
    const rad = join(dir, 'rad.bfg');
    const out = join(dir, 'fused.bfg');
    writeFileSync(img, encodeBfg(cameraVolume));
    writeFileSync(rad, encodeBfg(radarBev));
    runCli(['fuse', '--img', img, '--radar', rad, '--ckpt', checkpointPath,
            '--out', out]);
    return decodeBfg(readFileSync(out));
  });
}

function toLabelVolume(handle: ArrayHandle, what: string): ArrayHandle {
  let shape = handle.shape;
  if (shape.length === 3) shape = [1, ...shape];
  if (shape.length !== 4 || shape[0] !== 1) {
    throw new Error(`${what}: expected (Z, H, W) or (1, Z, H, W), got [${handle.shape}]`);
  }
  const data =
    handle.data instanceof Float32Array
      ? handle.data
      : Float32Array.from(handle.data);
  return wrapArray(data, shape);
}

/** Per-class IoU and means between two class-id volumes. Accepts f32 or
 * i32 data shaped (Z, H, W) or (1, Z, H, W). */
export function miou(
  pred: ArrayHandle,
  gt: ArrayHandle,
  numClasses: number,
  dynamicClassIds: number[] = [],
): MiouReport {
  return withScratchDir((dir) => {
    const predPath = join(dir, 'pred.bfg');
    const gtPath = join(dir, 'gt.bfg');
    const reportPath = join(dir, 'report.txt');
    writeFileSync(predPath, encodeBfg(toLabelVolume(pred, 'pred')));
    writeFileSync(gtPath, encodeBfg(toLabelVolume(gt, 'gt')));
    const args = ['miou', '--pred', predPath, '--gt', gtPath,
                  '--num-classes', String(numClasses), '--report', reportPath];
    if (dynamicClassIds.length) args.push('--dynamic', dynamicClassIds.join(','));
    runCli(args);
    const kv = readKv(reportPath);
    const report: MiouReport = {
      perClassIou: {},
      miou: Number(kv['miou']),
      miouDynamic: Number(kv['miou_dynamic']),
      intersections: {},
      unions: {},
    };
    for (const key of Object.keys(kv)) {
      if (key.startsWith('iou.')) report.perClassIou[Number(key.slice(4))] = Number(kv[key]);
      if (key.startsWith('intersection.')) {
        report.intersections[Number(key.slice(13))] = Number(kv[key]);
      }
      if (key.startsWith('union.')) report.unions[Number(key.slice(6))] = Number(kv[key]);
    }
    return report;
  });
}
