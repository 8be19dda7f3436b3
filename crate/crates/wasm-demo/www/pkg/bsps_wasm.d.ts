/* tslint:disable */
/* eslint-disable */

/**
 * One draw of a zero-mean exponential-kernel field on an `n x n` lattice.
 */
export function gp_field(range: number, sd: number, n: number, seed: bigint): Float64Array;

/**
 * Histogram of `draws` Polya-gamma PG(1, c) variates over `[0, upper)`.
 * The last two entries are the sample mean and the exact mean.
 */
export function pg_histogram(c: number, draws: number, bins: number, upper: number, seed: bigint): Float64Array;

/**
 * Variational fit to a simulated two-region data set. Returns the posterior
 * mean weight of each agent on an `n x n` lattice (agent 1 first), followed
 * by the training sites as `x, y` pairs.
 */
export function toy_weight_map(n_train: number, n: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly gp_field: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly pg_histogram: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly toy_weight_map: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
