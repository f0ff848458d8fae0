/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_flowdemo_free: (a: number, b: number) => void;
export const flowdemo_new: (a: number, b: number, c: number) => [number, number, number];
export const flowdemo_reflow: (a: number, b: number) => [number, number, number];
export const flowdemo_round: (a: number) => number;
export const flowdemo_steps: (a: number) => number;
export const flowdemo_straightness: (a: number) => [number, number, number];
export const flowdemo_target: (a: number, b: number) => [number, number, number, number];
export const flowdemo_train: (a: number, b: number) => [number, number, number];
export const flowdemo_trajectories: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
