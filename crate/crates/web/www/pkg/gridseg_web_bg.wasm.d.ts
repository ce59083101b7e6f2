/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_cost_free: (a: number, b: number) => void;
export const __wbg_get_cost_full_entries: (a: number) => number;
export const __wbg_get_cost_gridded_entries: (a: number) => number;
export const __wbg_get_cost_ratio: (a: number) => number;
export const __wbg_get_cost_tiles: (a: number) => number;
export const __wbg_picture_free: (a: number, b: number) => void;
export const __wbg_set_cost_full_entries: (a: number, b: number) => void;
export const __wbg_set_cost_gridded_entries: (a: number, b: number) => void;
export const __wbg_set_cost_ratio: (a: number, b: number) => void;
export const __wbg_set_cost_tiles: (a: number, b: number) => void;
export const attentionCost: (a: number, b: number, c: number) => [number, number, number];
export const cirrusSample: (a: number, b: number, c: number, d: number) => [number, number, number];
export const gaborBank: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const picture_height: (a: number) => number;
export const picture_pixels: (a: number) => [number, number];
export const picture_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
