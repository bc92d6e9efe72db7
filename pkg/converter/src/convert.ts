/**
 * Whole-file conversion from the corpus distribution's serialized form (a pickled
 * dict of train/valid/test piece lists, or its JSON twin) to the canonical dataset
 * JSON consumed by the model library.
 *
 * Pieces containing out-of-range pitches are never clipped: they are excluded from
 * the output and itemized in the report.
 */

import * as fs from "fs";

import { loads, PickleValue } from "./pickle";
import { repairPiece, MIN_PITCH, MAX_PITCH } from "./repair";

export const SPLIT_NAMES = ["train", "valid", "test"] as const;
export const RESOLUTIONS = ["quarter", "eighth", "sixteenth"] as const;
export type Resolution = (typeof RESOLUTIONS)[number];

export interface SplitReport {
  piecesIn: number;
  piecesOut: number;
  frames: number;
  repairedFrames: number;
  droppedPitches: number;
  carriedVoices: number;
  excludedPieces: { index: number; outOfRange: number[] }[];
}

export interface ConversionReport {
  resolution: Resolution;
  splits: { [name: string]: SplitReport };
}

type RawSplits = { [name: string]: number[][][] };

function asPitch(v: PickleValue): number {
  if (typeof v === "number") {
    if (Number.isInteger(v)) return v;
    if (Math.abs(v - Math.round(v)) < 1e-9) return Math.round(v);
    throw new Error(`non-integral pitch value ${v}`);
  }
  throw new Error(`pitch is not a number: ${JSON.stringify(v)}`);
}

function extractSplits(data: PickleValue): RawSplits {
  if (data === null || typeof data !== "object" || Array.isArray(data)) {
    throw new Error("input must be a mapping of split names to piece lists");
  }
  const record = data as { [key: string]: PickleValue };
  const source = (record.splits ?? record) as { [key: string]: PickleValue };
  const splits: RawSplits = {};
  for (const name of SPLIT_NAMES) {
    const pieces = source[name];
    if (pieces === undefined) continue;
    if (!Array.isArray(pieces)) throw new Error(`split '${name}' is not a list`);
    splits[name] = pieces.map((piece, pi) => {
      if (!Array.isArray(piece)) {
        throw new Error(`${name}[${pi}] is not a list of frames`);
      }
      return piece.map((frame) => {
        if (!Array.isArray(frame)) throw new Error(`${name}[${pi}] has a non-list frame`);
        return frame.map(asPitch);
      });
    });
  }
  if (Object.keys(splits).length === 0) {
    throw new Error(`no splits found; expected keys among ${SPLIT_NAMES.join(", ")}`);
  }
  return splits;
}

export function readInput(path: string): RawSplits {
  const buf = fs.readFileSync(path);
  // JSON files start with whitespace or a brace; pickles start with an opcode.
  const head = buf.subarray(0, 64).toString("latin1").trimStart();
  if (head.startsWith("{")) {
    return extractSplits(JSON.parse(buf.toString("utf8")));
  }
  return extractSplits(loads(buf));
}

export function convert(
  inputPath: string,
  outputPath: string,
  resolution: Resolution = "quarter"
): ConversionReport {
  if (!RESOLUTIONS.includes(resolution)) {
    throw new Error(`unknown resolution '${resolution}'`);
  }
  const raw = readInput(inputPath);
  const outSplits: { [name: string]: number[][][] } = {};
  const report: ConversionReport = { resolution, splits: {} };

  for (const name of SPLIT_NAMES) {
    const pieces = raw[name];
    if (pieces === undefined) continue;
    const splitReport: SplitReport = {
      piecesIn: pieces.length,
      piecesOut: 0,
      frames: 0,
      repairedFrames: 0,
      droppedPitches: 0,
      carriedVoices: 0,
      excludedPieces: [],
    };
    const converted: number[][][] = [];
    pieces.forEach((piece, index) => {
      const r = repairPiece(piece);
      if (r.outOfRange.length > 0) {
        splitReport.excludedPieces.push({ index, outOfRange: r.outOfRange });
        return;
      }
      converted.push(r.frames);
      splitReport.piecesOut += 1;
      splitReport.frames += r.frames.length;
      splitReport.repairedFrames += r.repairedFrames;
      splitReport.droppedPitches += r.droppedPitches;
      splitReport.carriedVoices += r.carriedVoices;
    });
    outSplits[name] = converted;
    report.splits[name] = splitReport;
  }

  const payload = { resolution, splits: outSplits };
  fs.writeFileSync(outputPath, canonicalJson(payload));
  return report;
}

/** Compact JSON with sorted keys, so reruns are byte-identical. */
export function canonicalJson(value: unknown): string {
  const order = (v: unknown): unknown => {
    if (Array.isArray(v)) return v.map(order);
    if (v !== null && typeof v === "object") {
      const src = v as { [key: string]: unknown };
      const dst: { [key: string]: unknown } = {};
      for (const key of Object.keys(src).sort()) dst[key] = order(src[key]);
      return dst;
    }
    return v;
  };
  return JSON.stringify(order(value));
}

export { MIN_PITCH, MAX_PITCH };
