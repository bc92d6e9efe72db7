/**
 * Frame repair: force every chord onto exactly four voices, soprano to bass.
 *
 * Frames arrive as unordered pitch tuples of any size. Output frames are sorted
 * descending. Oversized frames drop their innermost pitches (the outer voices carry
 * structure). Undersized frames keep the voices whose previous pitches best match the
 * sounding ones (order-preserving, minimal total movement) and carry the other voices
 * forward; before any frame exists, gaps duplicate the nearest filled voice, ties
 * toward the voice above.
 */

export const MIN_PITCH = 36;
export const MAX_PITCH = 88;
export const NUM_VOICES = 4;

export interface FrameRepair {
  frame: number[];
  droppedPitches: number[];
  carriedVoices: number[];
}

function combinations(n: number, k: number): number[][] {
  const out: number[][] = [];
  const pick = (start: number, acc: number[]) => {
    if (acc.length === k) {
      out.push([...acc]);
      return;
    }
    for (let i = start; i <= n - (k - acc.length); i++) {
      acc.push(i);
      pick(i + 1, acc);
      acc.pop();
    }
  };
  pick(0, []);
  return out;
}

/** Repair one frame given the previous repaired frame (or null at the start). */
export function repairFrame(pitches: number[], prev: number[] | null): FrameRepair {
  const sorted = [...pitches].sort((a, b) => b - a);

  if (sorted.length === NUM_VOICES) {
    return { frame: sorted, droppedPitches: [], carriedVoices: [] };
  }

  if (sorted.length > NUM_VOICES) {
    // Keep the two outermost pitches on each side; the middle goes.
    const keep = [sorted[0], sorted[1], sorted[sorted.length - 2], sorted[sorted.length - 1]];
    const dropped = sorted.slice(2, sorted.length - 2);
    return { frame: keep, droppedPitches: dropped, carriedVoices: [] };
  }

  if (sorted.length === 0) {
    if (prev === null) throw new Error("piece starts with an empty frame");
    return { frame: [...prev], droppedPitches: [], carriedVoices: [0, 1, 2, 3] };
  }

  if (prev !== null) {
    // Assign the sounding pitches to voices, preserving top-down order and
    // minimizing total movement from the previous frame; the rest hold over.
    let best: number[] = [];
    let bestCost = Infinity;
    for (const slots of combinations(NUM_VOICES, sorted.length)) {
      let cost = 0;
      for (let j = 0; j < slots.length; j++) cost += Math.abs(sorted[j] - prev[slots[j]]);
      if (cost < bestCost) {
        bestCost = cost;
        best = slots;
      }
    }
    const frame = [...prev];
    const carried = [];
    for (let v = 0, j = 0; v < NUM_VOICES; v++) {
      if (j < best.length && best[j] === v) {
        frame[v] = sorted[j];
        j++;
      } else {
        carried.push(v);
      }
    }
    return { frame, droppedPitches: [], carriedVoices: carried };
  }

  // First frame: spread outermost-first (soprano takes the highest, bass the
  // lowest, then inward from the top), then fill gaps by duplicating the nearest
  // assigned voice, ties toward the voice above.
  const frame: (number | null)[] = [null, null, null, null];
  const queue = [...sorted];
  frame[0] = queue.shift()!;
  if (queue.length > 0) frame[NUM_VOICES - 1] = queue.pop()!;
  let slot = 1;
  while (queue.length > 0) frame[slot++] = queue.shift()!;
  const assigned = [...frame.keys()].filter((v) => frame[v] !== null);
  const carried: number[] = [];
  for (let v = 0; v < NUM_VOICES; v++) {
    if (frame[v] === null) {
      carried.push(v);
      const nearest = assigned.reduce((best, u) =>
        Math.abs(u - v) < Math.abs(best - v) ||
        (Math.abs(u - v) === Math.abs(best - v) && u < best)
          ? u
          : best
      );
      frame[v] = frame[nearest];
    }
  }
  return { frame: frame as number[], droppedPitches: [], carriedVoices: carried };
}

export interface PieceRepair {
  frames: number[][];
  repairedFrames: number;
  droppedPitches: number;
  carriedVoices: number;
  outOfRange: number[];
}

/** Repair a whole piece; collects counts and any out-of-range pitches found. */
export function repairPiece(rawFrames: number[][]): PieceRepair {
  if (rawFrames.length === 0) throw new Error("piece has no frames");
  const frames: number[][] = [];
  let repaired = 0;
  let dropped = 0;
  let carried = 0;
  const outOfRange: number[] = [];
  let prev: number[] | null = null;
  for (const raw of rawFrames) {
    for (const p of raw) {
      if (!Number.isInteger(p)) throw new Error(`non-integer pitch ${p}`);
      if (p < MIN_PITCH || p > MAX_PITCH) outOfRange.push(p);
    }
    const r = repairFrame(raw, prev);
    if (r.droppedPitches.length > 0 || r.carriedVoices.length > 0) repaired++;
    dropped += r.droppedPitches.length;
    carried += r.carriedVoices.length;
    frames.push(r.frame);
    prev = r.frame;
  }
  return {
    frames,
    repairedFrames: repaired,
    droppedPitches: dropped,
    carriedVoices: carried,
    outOfRange,
  };
}
