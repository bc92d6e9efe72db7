/**
 * CLI: chorale-convert <input.pkl|input.json> <output.json> [--resolution quarter]
 *
 * The resolution flag records the input's quantization level in the output header;
 * the corpus distribution referenced by the model library is quarter-note quantized.
 */

import { convert, ConversionReport, Resolution, RESOLUTIONS } from "./convert";

function usage(): never {
  console.error(
    "usage: chorale-convert <input.pkl|input.json> <output.json> " +
      `[--resolution ${RESOLUTIONS.join("|")}]`
  );
  process.exit(1);
}

export function main(argv: string[]): number {
  const positional: string[] = [];
  let resolution: Resolution = "quarter";
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === "--resolution") {
      const value = argv[++i];
      if (!RESOLUTIONS.includes(value as Resolution)) usage();
      resolution = value as Resolution;
    } else if (argv[i].startsWith("-")) {
      usage();
    } else {
      positional.push(argv[i]);
    }
  }
  if (positional.length !== 2) usage();

  let report: ConversionReport;
  try {
    report = convert(positional[0], positional[1], resolution);
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : String(err)}`);
    return 1;
  }
  console.log(JSON.stringify(report, null, 2));
  return 0;
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
