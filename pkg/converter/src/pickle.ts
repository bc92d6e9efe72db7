/**
 * Minimal Python pickle reader covering the value types the chorale corpus uses:
 * dicts, lists, tuples, ints, floats, strings and booleans, in protocols 0 through 4.
 * Class instances (GLOBAL/REDUCE and friends) are intentionally unsupported; files
 * containing them should be exported to JSON on the Python side instead.
 */

export type PickleValue =
  | null
  | boolean
  | number
  | string
  | PickleValue[]
  | { [key: string]: PickleValue };

const MARK_SENTINEL = Symbol("mark");

class Reader {
  pos = 0;
  constructor(private buf: Buffer) {}

  u8(): number {
    return this.buf[this.pos++];
  }
  u16le(): number {
    const v = this.buf.readUInt16LE(this.pos);
    this.pos += 2;
    return v;
  }
  u32le(): number {
    const v = this.buf.readUInt32LE(this.pos);
    this.pos += 4;
    return v;
  }
  i32le(): number {
    const v = this.buf.readInt32LE(this.pos);
    this.pos += 4;
    return v;
  }
  u64le(): number {
    const v = this.buf.readBigUInt64LE(this.pos);
    this.pos += 8;
    return Number(v);
  }
  f64be(): number {
    const v = this.buf.readDoubleBE(this.pos);
    this.pos += 8;
    return v;
  }
  bytes(n: number): Buffer {
    const v = this.buf.subarray(this.pos, this.pos + n);
    this.pos += n;
    return v;
  }
  line(): string {
    const end = this.buf.indexOf(0x0a, this.pos);
    if (end < 0) throw new Error("unterminated pickle text line");
    const v = this.buf.toString("latin1", this.pos, end);
    this.pos = end + 1;
    return v;
  }
  get done(): boolean {
    return this.pos >= this.buf.length;
  }
}

function parseTextInt(line: string): PickleValue {
  // Protocol-0 INT writes booleans as 00/01 lines.
  if (line === "00") return false;
  if (line === "01") return true;
  const v = Number(line.replace(/L$/, ""));
  if (!Number.isFinite(v)) throw new Error(`bad pickle integer ${line}`);
  return v;
}

function parseTextString(line: string): string {
  // Repr-quoted latin-1 string from protocol-0 STRING.
  if (line.length < 2 || line[0] !== line[line.length - 1] || !"'\"".includes(line[0])) {
    throw new Error("malformed pickle string literal");
  }
  const body = line.slice(1, -1);
  return body.replace(/\\x([0-9a-fA-F]{2})|\\([\\'"nrt])/g, (_, hex, esc) => {
    if (hex !== undefined) return String.fromCharCode(parseInt(hex, 16));
    return { "\\": "\\", "'": "'", '"': '"', n: "\n", r: "\r", t: "\t" }[
      esc as string
    ] as string;
  });
}

function decodeLong1(raw: Buffer): number {
  // Little-endian two's-complement integer of arbitrary width.
  if (raw.length === 0) return 0;
  let v = 0n;
  for (let i = raw.length - 1; i >= 0; i--) v = (v << 8n) | BigInt(raw[i]);
  const bits = 8n * BigInt(raw.length);
  if (raw[raw.length - 1] & 0x80) v -= 1n << bits;
  return Number(v);
}

/** Unpickle a buffer holding one pickled object. */
export function loads(buf: Buffer): PickleValue {
  const r = new Reader(buf);
  const stack: unknown[] = [];
  const memo = new Map<number, unknown>();

  const popMark = (): unknown[] => {
    const idx = stack.lastIndexOf(MARK_SENTINEL);
    if (idx < 0) throw new Error("pickle mark not found");
    const items = stack.splice(idx + 1);
    stack.pop(); // the mark itself
    return items;
  };
  const top = (): unknown => stack[stack.length - 1];

  const setItems = (pairs: unknown[]) => {
    const dict = top() as { [key: string]: PickleValue };
    for (let i = 0; i < pairs.length; i += 2) {
      dict[keyOf(pairs[i])] = pairs[i + 1] as PickleValue;
    }
  };

  while (!r.done) {
    const op = r.u8();
    switch (op) {
      case 0x80: // PROTO
        r.u8();
        break;
      case 0x95: // FRAME (protocol 4); length prefix only
        r.u64le();
        break;
      case 0x28: // MARK '('
        stack.push(MARK_SENTINEL);
        break;
      case 0x2e: // STOP '.'
        return stack.pop() as PickleValue;
      case 0x30: // POP '0'
        stack.pop();
        break;
      case 0x32: // DUP '2'
        stack.push(top());
        break;
      case 0x4e: // NONE 'N'
        stack.push(null);
        break;
      case 0x88: // NEWTRUE
        stack.push(true);
        break;
      case 0x89: // NEWFALSE
        stack.push(false);
        break;
      case 0x49: // INT 'I'
        stack.push(parseTextInt(r.line()));
        break;
      case 0x4c: // LONG 'L'
        stack.push(parseTextInt(r.line()));
        break;
      case 0x4a: // BININT 'J'
        stack.push(r.i32le());
        break;
      case 0x4b: // BININT1 'K'
        stack.push(r.u8());
        break;
      case 0x4d: // BININT2 'M'
        stack.push(r.u16le());
        break;
      case 0x8a: // LONG1
        stack.push(decodeLong1(r.bytes(r.u8())));
        break;
      case 0x46: // FLOAT 'F'
        stack.push(Number(r.line()));
        break;
      case 0x47: // BINFLOAT 'G'
        stack.push(r.f64be());
        break;
      case 0x53: // STRING 'S'
        stack.push(parseTextString(r.line()));
        break;
      case 0x56: // UNICODE 'V'
        stack.push(r.line());
        break;
      case 0x55: // SHORT_BINSTRING 'U'
        stack.push(r.bytes(r.u8()).toString("latin1"));
        break;
      case 0x54: // BINSTRING 'T'
        stack.push(r.bytes(r.u32le()).toString("latin1"));
        break;
      case 0x58: // BINUNICODE 'X'
        stack.push(r.bytes(r.u32le()).toString("utf8"));
        break;
      case 0x8c: // SHORT_BINUNICODE
        stack.push(r.bytes(r.u8()).toString("utf8"));
        break;
      case 0x8d: // BINUNICODE8
        stack.push(r.bytes(r.u64le()).toString("utf8"));
        break;
      case 0x29: // EMPTY_TUPLE ')'
        stack.push([]);
        break;
      case 0x74: { // TUPLE 't'
        stack.push(popMark());
        break;
      }
      case 0x85: { // TUPLE1
        stack.push([stack.pop()]);
        break;
      }
      case 0x86: { // TUPLE2
        const b = stack.pop();
        const a = stack.pop();
        stack.push([a, b]);
        break;
      }
      case 0x87: { // TUPLE3
        const c = stack.pop();
        const b = stack.pop();
        const a = stack.pop();
        stack.push([a, b, c]);
        break;
      }
      case 0x5d: // EMPTY_LIST ']'
        stack.push([]);
        break;
      case 0x6c: // LIST 'l'
        stack.push(popMark());
        break;
      case 0x61: { // APPEND 'a'
        const v = stack.pop();
        (top() as unknown[]).push(v);
        break;
      }
      case 0x65: { // APPENDS 'e'
        const items = popMark();
        (top() as unknown[]).push(...items);
        break;
      }
      case 0x7d: // EMPTY_DICT '}'
        stack.push({});
        break;
      case 0x64: { // DICT 'd'
        const pairs = popMark();
        stack.push({});
        setItems(pairs);
        break;
      }
      case 0x73: { // SETITEM 's'
        const v = stack.pop();
        const k = stack.pop();
        setItems([k, v]);
        break;
      }
      case 0x75: // SETITEMS 'u'
        setItems(popMark());
        break;
      case 0x70: // PUT 'p'
        memo.set(Number(r.line()), top());
        break;
      case 0x71: // BINPUT 'q'
        memo.set(r.u8(), top());
        break;
      case 0x72: // LONG_BINPUT 'r'
        memo.set(r.u32le(), top());
        break;
      case 0x94: // MEMOIZE
        memo.set(memo.size, top());
        break;
      case 0x67: // GET 'g'
        stack.push(memo.get(Number(r.line())));
        break;
      case 0x68: // BINGET 'h'
        stack.push(memo.get(r.u8()));
        break;
      case 0x6a: // LONG_BINGET 'j'
        stack.push(memo.get(r.u32le()));
        break;
      default:
        throw new Error(
          `unsupported pickle opcode 0x${op.toString(16)} at byte ${r.pos - 1}; ` +
            "only plain dict/list/tuple/number/string pickles are supported"
        );
    }
  }
  throw new Error("pickle ended without STOP");
}

function keyOf(k: unknown): string {
  if (typeof k === "string") return k;
  if (typeof k === "number") return String(k);
  throw new Error(`unsupported pickle dict key ${String(k)}`);
}
