/**
 * convert_assets --in <archive.npz> --out <container.grft> [--manifest m.json]
 *
 * One-way converter from body-model / trained-checkpoint archives to the
 * engine's tensor containers. Exit code 1 on any conversion failure.
 */

import * as fs from "node:fs";
import { readNpz } from "./npz.js";
import { writeGrft } from "./grft.js";
import { convertArchive } from "./convert.js";

function usage(): never {
  console.error(
    "usage: convert_assets --in <archive.npz> --out <model.grft> [--manifest <manifest.json>]"
  );
  process.exit(2);
}

export function main(argv: string[]): number {
  const args = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) usage();
    args.set(argv[i].slice(2), argv[i + 1]);
  }
  const input = args.get("in");
  const output = args.get("out");
  if (!input || !output) usage();
  try {
    const archive = readNpz(fs.readFileSync(input));
    const { tensors, manifest } = convertArchive(archive, input, output);
    fs.writeFileSync(output, writeGrft(tensors));
    const manifestText = JSON.stringify(manifest, null, 1) + "\n";
    const manifestPath = args.get("manifest");
    if (manifestPath) {
      fs.writeFileSync(manifestPath, manifestText);
    } else {
      console.log(manifestText.trimEnd());
    }
    console.error(
      `converted ${manifest.layout} archive: ${tensors.size} tensors -> ${output}`
    );
    return 0;
  } catch (err) {
    console.error(`conversion failed: ${(err as Error).name}: ${(err as Error).message}`);
    return 1;
  }
}

if (process.argv[1] && process.argv[1].endsWith("cli.js")) {
  process.exit(main(process.argv.slice(2)));
}
