/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_camera_height: (a: number) => number;
export const demo_camera_name: (a: number, b: number) => [number, number];
export const demo_camera_rgba: (a: number, b: number) => [number, number];
export const demo_camera_width: (a: number) => number;
export const demo_cameras: (a: number) => number;
export const demo_depth_bins: (a: number) => number;
export const demo_frustum_rgba: (a: number, b: number) => [number, number, number, number];
export const demo_grid_size: (a: number) => number;
export const demo_ground_truth_rgba: (a: number) => [number, number, number, number];
export const demo_ipm_rgba: (a: number) => [number, number, number, number];
export const demo_new: (a: number, b: number) => [number, number, number];
export const demo_painted_rgba: (a: number, b: number) => [number, number, number, number];
export const demo_vehicles: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
