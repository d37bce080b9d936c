/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_synthperson_free: (a: number, b: number) => void;
export const colorResidualView: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const grayscaleView: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const maskCaption: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const synthperson_caption: (a: number) => [number, number];
export const synthperson_height: (a: number) => number;
export const synthperson_new: (a: number, b: number) => [number, number, number];
export const synthperson_rgba: (a: number) => [number, number];
export const synthperson_twin: (a: number) => number;
export const synthperson_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
