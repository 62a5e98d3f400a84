/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_maskpreview_free: (a: number, b: number) => void;
export const __wbg_room_free: (a: number, b: number) => void;
export const impulseResponse: (a: number, b: number, c: bigint, d: number, e: number, f: number) => [number, number, number, number];
export const maskpreview_pixels: (a: number) => [number, number];
export const maskpreview_ratio: (a: number) => number;
export const previewMask: (a: number, b: number, c: number, d: number, e: bigint, f: bigint, g: number) => [number, number, number];
export const renderRoom: (a: bigint, b: number) => [number, number, number];
export const room_clutterRatio: (a: number) => number;
export const room_cluttered: (a: number) => [number, number];
export const room_empty: (a: number) => [number, number];
export const room_height: (a: number) => number;
export const room_semantic: (a: number) => [number, number];
export const room_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
