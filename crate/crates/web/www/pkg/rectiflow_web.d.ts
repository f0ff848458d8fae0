/* tslint:disable */
/* eslint-disable */

export class FlowDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `dataset` is one of `two_gaussians`, `two_moons`, `checkerboard`.
     */
    constructor(dataset: string, seed: number);
    /**
     * Starts the next round and returns its number.
     */
    reflow(pairs: number): number;
    straightness(): number;
    target(n: number): Float64Array;
    /**
     * Mean loss over `steps` optimizer steps.
     */
    train(steps: number): number;
    /**
     * `steps + 1` states of `n` points, laid out `[step][row][x, y]`.
     */
    trajectories(n: number, steps: number): Float64Array;
    readonly round: number;
    readonly steps: number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_flowdemo_free: (a: number, b: number) => void;
    readonly flowdemo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly flowdemo_reflow: (a: number, b: number) => [number, number, number];
    readonly flowdemo_round: (a: number) => number;
    readonly flowdemo_steps: (a: number) => number;
    readonly flowdemo_straightness: (a: number) => [number, number, number];
    readonly flowdemo_target: (a: number, b: number) => [number, number, number, number];
    readonly flowdemo_train: (a: number, b: number) => [number, number, number];
    readonly flowdemo_trajectories: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
