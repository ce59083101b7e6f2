/* tslint:disable */
/* eslint-disable */

/**
 * Affinity-matrix sizes of gridded versus full attention.
 */
export class Cost {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    full_entries: number;
    gridded_entries: number;
    ratio: number;
    tiles: number;
}

/**
 * An RGBA image ready for `ImageData`.
 */
export class Picture {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly height: number;
    readonly pixels: Uint8Array;
    readonly width: number;
}

export function attentionCost(side: number, scales: number, tile: number): Cost;

export function cirrusSample(seed: number, size: number, force_cirrus: boolean, coverage: number): Picture;

export function gaborBank(orientations: number, kernel: number, wavelength: number, sigma: number, phase: number, zoom: number): Picture;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_cost_free: (a: number, b: number) => void;
    readonly __wbg_get_cost_full_entries: (a: number) => number;
    readonly __wbg_get_cost_gridded_entries: (a: number) => number;
    readonly __wbg_get_cost_ratio: (a: number) => number;
    readonly __wbg_get_cost_tiles: (a: number) => number;
    readonly __wbg_picture_free: (a: number, b: number) => void;
    readonly __wbg_set_cost_full_entries: (a: number, b: number) => void;
    readonly __wbg_set_cost_gridded_entries: (a: number, b: number) => void;
    readonly __wbg_set_cost_ratio: (a: number, b: number) => void;
    readonly __wbg_set_cost_tiles: (a: number, b: number) => void;
    readonly attentionCost: (a: number, b: number, c: number) => [number, number, number];
    readonly cirrusSample: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly gaborBank: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly picture_height: (a: number) => number;
    readonly picture_pixels: (a: number) => [number, number];
    readonly picture_width: (a: number) => number;
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
