export type Dtype = 'f32' | 'i32';

export type DataArray = Float32Array | Int32Array;

/** A contiguous numeric array plus its logical shape. Wrapping and
 * unwrapping never copy; the `data` reference is the buffer itself. */
export interface ArrayHandle {
  dtype: Dtype;
  shape: number[];
  data: DataArray;
}

export function elementCount(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function wrapArray(data: DataArray, shape: number[]): ArrayHandle {
  const count = elementCount(shape);
  if (data.length !== count) {
    throw new Error(
      `array of length ${data.length} does not match shape [${shape}] (${count} elements)`,
    );
  }
  return {
    dtype: data instanceof Float32Array ? 'f32' : 'i32',
    shape: [...shape],
    data,
  };
}

/** Returns the handle's backing array, unchanged and uncopied. */
export function unwrapArray(handle: ArrayHandle): DataArray {
  return handle.data;
}

export function expectDtype(handle: ArrayHandle, dtype: Dtype, what: string): void {
  if (handle.dtype !== dtype) {
    throw new Error(`${what}: expected ${dtype} data, got ${handle.dtype}`);
  }
}

export function expectRank(handle: ArrayHandle, rank: number, what: string): void {
  if (handle.shape.length !== rank) {
    throw new Error(
      `${what}: expected a rank-${rank} array, got shape [${handle.shape}]`,
    );
  }
}
