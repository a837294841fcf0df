import { spawnSync } from 'node:child_process';
import { mkdtempSync, rmSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';

/** Resolve the native CLI. RADARFUSE_BIN overrides (whitespace-split so
 * forms like "python3 -m radarfuse.cli" work); default is the installed
 * `radarfuse` entry point. */
export function cliCommand(): string[] {
  const override = process.env.RADARFUSE_BIN;
  if (override && override.trim()) {
    return override.trim().split(/\s+/);
  }
  return ['radarfuse'];
}

/** Run one CLI invocation; throws with the CLI's stderr text on failure. */
export function runCli(args: string[]): string {
  const [cmd, ...prefix] = cliCommand();
  const result = spawnSync(cmd, [...prefix, ...args], { encoding: 'utf8' });
  if (result.error) {
    throw new Error(`failed to launch ${cmd}: ${result.error.message}`);
  }
  if (result.status !== 0) {
    const detail = (result.stderr || '').trim() || `exit code ${result.status}`;
    throw new Error(detail);
  }
  return result.stdout;
}

/** Run `body` with a fresh scratch directory, removed afterwards. */
export function withScratchDir<T>(body: (dir: string) => T): T {
  const dir = mkdtempSync(join(tmpdir(), 'radarfuse-'));
  try {
    return body(dir);
  } finally {
    rmSync(dir, { recursive: true, force: true });
  }
}
