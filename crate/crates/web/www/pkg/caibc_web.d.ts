/* tslint:disable */
/* eslint-disable */

export class SynthPerson {
    free(): void;
    [Symbol.dispose](): void;
    constructor(seed: number, index: number);
    readonly caption: string;
    readonly height: number;
    readonly rgba: Uint8Array;
    /**
     * -1 when the identity has no twin.
     */
    readonly twin: number;
    readonly width: number;
}

export function colorResidualView(rgba: Uint8Array, width: number, height: number): Uint8Array;

export function grayscaleView(rgba: Uint8Array, width: number, height: number): Uint8Array;

/**
 * JSON `{tokens, masked, prior}`.
 */
export function maskCaption(caption: string, extra_words: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_synthperson_free: (a: number, b: number) => void;
    readonly colorResidualView: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly grayscaleView: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly maskCaption: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly synthperson_caption: (a: number) => [number, number];
    readonly synthperson_height: (a: number) => number;
    readonly synthperson_new: (a: number, b: number) => [number, number, number];
    readonly synthperson_rgba: (a: number) => [number, number];
    readonly synthperson_twin: (a: number) => number;
    readonly synthperson_width: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
