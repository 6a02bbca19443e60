/* tslint:disable */
/* eslint-disable */

/**
 * One sampled scene with default field, gate and integrator settings.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    constructor(regime: string, seed: bigint);
    /**
     * Gate evaluation at a point at step `t`: gate value, its two factors
     * and the primitive fan.
     */
    probe(x: number, y: number, t: number): string;
    /**
     * Rolls out a context field with fixed coefficients. `gate` is
     * "route_aware" or "open"; zero coefficients give the geometry-only
     * path.
     */
    rollout(lambda_s: number, lambda_h: number, gate: string): string;
    /**
     * Grid, start, goal, obstacles and escape time. `blocked` marks
     * non-traversable nodes before any event fires and `opened` the nodes
     * that become traversable afterwards.
     */
    scene(): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_new: (a: number, b: number, c: bigint) => [number, number, number];
    readonly demo_probe: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_rollout: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_scene: (a: number) => [number, number];
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
