/* tslint:disable */
/* eslint-disable */

/**
 * Runs the adaptive KL controller for `steps` batches against a toy policy
 * whose measured KL relaxes toward `free_kl / (1 + pull * beta)`.
 * Returns `[kl, beta, ...]` per step.
 */
export function kl_controller_trace(init_beta: number, kl_target: number, free_kl: number, pull: number, steps: number): Float64Array;

/**
 * Next-token distribution before and after the top-p cut, as
 * `[p_0, q_0, p_1, q_1, ...]` where `q` is zero outside the nucleus.
 */
export function nucleus_view(logits: Float64Array, temperature: number, top_p: number): Float64Array;

/**
 * Clipped objective against the unclipped `ratio * A` on `points` ratios
 * spread over `[0, max_ratio]`: `[r, clipped, unclipped, ...]`.
 */
export function surrogate_curve(advantage: number, eps: number, max_ratio: number, points: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly kl_controller_trace: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly nucleus_view: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly surrogate_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
