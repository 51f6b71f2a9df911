/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    camera_height(): number;
    camera_name(k: number): string;
    camera_rgba(k: number): Uint8Array;
    camera_width(): number;
    cameras(): number;
    depth_bins(): number;
    /**
     * Where one depth bin of every camera frustum lands on the grid, over a
     * dimmed ground truth.
     */
    frustum_rgba(depth_bin: number): Uint8Array;
    /**
     * BEV raster side length in cells (the grid is square).
     */
    grid_size(): number;
    ground_truth_rgba(): Uint8Array;
    /**
     * Ground-plane warp of all cameras, nearest camera per cell.
     */
    ipm_rgba(): Uint8Array;
    constructor(seed: number, vehicles: number);
    /**
     * LiDAR returns coloured from the camera images and pooled per cell.
     */
    painted_rgba(channels: number): Uint8Array;
    vehicles(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_camera_height: (a: number) => number;
    readonly demo_camera_name: (a: number, b: number) => [number, number];
    readonly demo_camera_rgba: (a: number, b: number) => [number, number];
    readonly demo_camera_width: (a: number) => number;
    readonly demo_cameras: (a: number) => number;
    readonly demo_depth_bins: (a: number) => number;
    readonly demo_frustum_rgba: (a: number, b: number) => [number, number, number, number];
    readonly demo_grid_size: (a: number) => number;
    readonly demo_ground_truth_rgba: (a: number) => [number, number, number, number];
    readonly demo_ipm_rgba: (a: number) => [number, number, number, number];
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_painted_rgba: (a: number, b: number) => [number, number, number, number];
    readonly demo_vehicles: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
