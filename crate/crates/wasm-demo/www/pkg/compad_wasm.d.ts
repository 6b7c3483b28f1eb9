/* tslint:disable */
/* eslint-disable */

/**
 * A generated category with its reference bank already built.
 */
export class Explorer {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Final anomaly map (row-major, `size × size`).
     */
    detect(index: number, w: Weights): Float32Array;
    /**
     * Ground-truth mask as 0/1 bytes; all zero for normal queries.
     */
    ground_truth(index: number): Uint8Array;
    /**
     * Query image as RGBA bytes.
     */
    image(index: number): Uint8Array;
    /**
     * Image-level AUC over every query under the given weights.
     */
    image_auc(w: Weights): number;
    image_score(index: number, w: Weights): number;
    is_anomalous(index: number): boolean;
    /**
     * `kind` is `"structural"` or `"logical"`.
     */
    constructor(kind: string, n_normal: number, n_anomalous: number, seed: bigint);
    query_count(): number;
    /**
     * Per-pixel component label (0 = unassigned, k = k-th component) for the query.
     */
    segment(index: number): Uint8Array;
    segment_branch(index: number): string;
    size(): number;
}

/**
 * Fusion and scorer weights set from the page sliders.
 */
export class Weights {
    free(): void;
    [Symbol.dispose](): void;
    constructor(pm: number, aware: number, vl: number, delta: number, eta: number);
    aware: number;
    delta: number;
    eta: number;
    pm: number;
    vl: number;
}

/**
 * AUC of arbitrary scores; `labels` holds 0/1 bytes.
 */
export function auc(scores: Float64Array, labels: Uint8Array): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_explorer_free: (a: number, b: number) => void;
    readonly __wbg_get_weights_aware: (a: number) => number;
    readonly __wbg_get_weights_delta: (a: number) => number;
    readonly __wbg_get_weights_eta: (a: number) => number;
    readonly __wbg_get_weights_pm: (a: number) => number;
    readonly __wbg_get_weights_vl: (a: number) => number;
    readonly __wbg_set_weights_aware: (a: number, b: number) => void;
    readonly __wbg_set_weights_delta: (a: number, b: number) => void;
    readonly __wbg_set_weights_eta: (a: number, b: number) => void;
    readonly __wbg_set_weights_pm: (a: number, b: number) => void;
    readonly __wbg_set_weights_vl: (a: number, b: number) => void;
    readonly __wbg_weights_free: (a: number, b: number) => void;
    readonly auc: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly explorer_detect: (a: number, b: number, c: number) => [number, number, number, number];
    readonly explorer_ground_truth: (a: number, b: number) => [number, number, number, number];
    readonly explorer_image: (a: number, b: number) => [number, number, number, number];
    readonly explorer_image_auc: (a: number, b: number) => [number, number, number];
    readonly explorer_image_score: (a: number, b: number, c: number) => [number, number, number];
    readonly explorer_is_anomalous: (a: number, b: number) => number;
    readonly explorer_new: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
    readonly explorer_query_count: (a: number) => number;
    readonly explorer_segment: (a: number, b: number) => [number, number, number, number];
    readonly explorer_segment_branch: (a: number, b: number) => [number, number, number, number];
    readonly explorer_size: (a: number) => number;
    readonly weights_new: (a: number, b: number, c: number, d: number, e: number) => number;
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
