/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_explorer_free: (a: number, b: number) => void;
export const __wbg_get_weights_aware: (a: number) => number;
export const __wbg_get_weights_delta: (a: number) => number;
export const __wbg_get_weights_eta: (a: number) => number;
export const __wbg_get_weights_pm: (a: number) => number;
export const __wbg_get_weights_vl: (a: number) => number;
export const __wbg_set_weights_aware: (a: number, b: number) => void;
export const __wbg_set_weights_delta: (a: number, b: number) => void;
export const __wbg_set_weights_eta: (a: number, b: number) => void;
export const __wbg_set_weights_pm: (a: number, b: number) => void;
export const __wbg_set_weights_vl: (a: number, b: number) => void;
export const __wbg_weights_free: (a: number, b: number) => void;
export const auc: (a: number, b: number, c: number, d: number) => [number, number, number];
export const explorer_detect: (a: number, b: number, c: number) => [number, number, number, number];
export const explorer_ground_truth: (a: number, b: number) => [number, number, number, number];
export const explorer_image: (a: number, b: number) => [number, number, number, number];
export const explorer_image_auc: (a: number, b: number) => [number, number, number];
export const explorer_image_score: (a: number, b: number, c: number) => [number, number, number];
export const explorer_is_anomalous: (a: number, b: number) => number;
export const explorer_new: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
export const explorer_query_count: (a: number) => number;
export const explorer_segment: (a: number, b: number) => [number, number, number, number];
export const explorer_segment_branch: (a: number, b: number) => [number, number, number, number];
export const explorer_size: (a: number) => number;
export const weights_new: (a: number, b: number, c: number, d: number, e: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
