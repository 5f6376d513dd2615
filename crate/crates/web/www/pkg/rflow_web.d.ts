/* tslint:disable */
/* eslint-disable */

export class Playground {
    free(): void;
    [Symbol.dispose](): void;
    data(n: number, seed: number): Float64Array;
    hasStudent(): boolean;
    iteration(): number;
    constructor(components: number, seed: number);
    paths(n: number, steps: number, seed: number, student: boolean): Float64Array;
    /**
     * `[teacher straightness, student straightness]`.
     */
    straighten(): Float64Array;
    totalIterations(): number;
    /**
     * Mean loss of the chunk, or `undefined` when training is finished.
     */
    train(steps: number): number | undefined;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_playground_free: (a: number, b: number) => void;
    readonly playground_data: (a: number, b: number, c: number) => [number, number, number, number];
    readonly playground_hasStudent: (a: number) => number;
    readonly playground_iteration: (a: number) => number;
    readonly playground_new: (a: number, b: number) => [number, number, number];
    readonly playground_paths: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly playground_straighten: (a: number) => [number, number, number, number];
    readonly playground_totalIterations: (a: number) => number;
    readonly playground_train: (a: number, b: number) => [number, number, number, number];
    readonly __externref_table_alloc: () => number;
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
