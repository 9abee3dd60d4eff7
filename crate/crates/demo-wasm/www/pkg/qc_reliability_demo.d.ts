/* tslint:disable */
/* eslint-disable */

/**
 * Predictive CoV and density before and after two checks of a plan.
 */
export function filter_cov(plan: string, v0: number, n: number, n_samples: number, seed: number): string;

/**
 * OC curves of a plan over defect rates 0.01 to 0.7, independent and AR(2).
 */
export function oc_curves(plan: string, fixed_cov: number, n_sim: number, seed: number): string;

/**
 * Design point and capacity reduction factor over wall heights 1 to 6 m.
 */
export function wall_capacity(h: number, t: number, e: number, f_b: number, f_m: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly filter_cov: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly oc_curves: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly wall_capacity: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
