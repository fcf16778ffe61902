/* tslint:disable */
/* eslint-disable */

/**
 * A small trainer driven one iteration at a time.
 */
export class Session {
    free(): void;
    [Symbol.dispose](): void;
    constructor(trainer: string, env: string, policy_epochs: number, seed: number);
    /**
     * Runs one iteration and returns its curve point as JSON.
     */
    step(): string;
}

export function densities(mu_old: number, log_std_old: number, mu_new: number, log_std_new: number, c_low: number, c_high: number, points: number): string;

export function estimator_lab_json(env: string, samples: number, seed: number, perturbation: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_session_free: (a: number, b: number) => void;
    readonly densities: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly estimator_lab_json: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly session_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly session_step: (a: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
