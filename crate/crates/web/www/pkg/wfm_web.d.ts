/* tslint:disable */
/* eslint-disable */

/**
 * Masked view plus the hole ratio that was drawn.
 */
export class MaskPreview {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    pixels(): Uint8Array;
    readonly ratio: number;
}

/**
 * A rendered room: empty, cluttered and semantic layers.
 */
export class Room {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    cluttered(): Uint8Array;
    empty(): Uint8Array;
    semantic(): Uint8Array;
    readonly clutterRatio: number;
    readonly height: number;
    readonly width: number;
}

/**
 * Heat map of how far a single pixel at `(row, col)` spreads through one mixer.
 */
export function impulseResponse(variant: string, seed: bigint, height: number, row: number, col: number): Uint8Array;

/**
 * Draws a `kind` mask with hole ratio in `[lo, hi)` over toy room `room_seed`.
 */
export function previewMask(kind: string, lo: number, hi: number, room_seed: bigint, mask_seed: bigint, height: number): MaskPreview;

/**
 * Renders toy room `seed` at `height x 2*height`.
 */
export function renderRoom(seed: bigint, height: number): Room;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_maskpreview_free: (a: number, b: number) => void;
    readonly __wbg_room_free: (a: number, b: number) => void;
    readonly impulseResponse: (a: number, b: number, c: bigint, d: number, e: number, f: number) => [number, number, number, number];
    readonly maskpreview_pixels: (a: number) => [number, number];
    readonly maskpreview_ratio: (a: number) => number;
    readonly previewMask: (a: number, b: number, c: number, d: number, e: bigint, f: bigint, g: number) => [number, number, number];
    readonly renderRoom: (a: bigint, b: number) => [number, number, number];
    readonly room_clutterRatio: (a: number) => number;
    readonly room_cluttered: (a: number) => [number, number];
    readonly room_empty: (a: number) => [number, number];
    readonly room_height: (a: number) => number;
    readonly room_semantic: (a: number) => [number, number];
    readonly room_width: (a: number) => number;
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
