/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_playground_free: (a: number, b: number) => void;
export const playground_data: (a: number, b: number, c: number) => [number, number, number, number];
export const playground_hasStudent: (a: number) => number;
export const playground_iteration: (a: number) => number;
export const playground_new: (a: number, b: number) => [number, number, number];
export const playground_paths: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const playground_straighten: (a: number) => [number, number, number, number];
export const playground_totalIterations: (a: number) => number;
export const playground_train: (a: number, b: number) => [number, number, number, number];
export const __externref_table_alloc: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
