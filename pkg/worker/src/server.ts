/**
 * Request loop: reads JSON-line requests, answers each with exactly one
 * response, and exits 0 only after an acknowledged shutdown.
 */

import * as readline from "node:readline";
import type { Readable, Writable } from "node:stream";

import { oracleScorer, parseOperation, Scorer, WireOperation } from "./oracle";
import { encodeResponse, parseRequestLine, PROTOCOL_VERSION, Response } from "./protocol";

export interface ServeOptions {
  /** Builds the scoring function from the hello config; swap in a real
   * model harness here. Defaults to the closed-form oracle. */
  createScorer?: (config: unknown) => Scorer;
}

export function serve(input: Readable, output: Writable, options: ServeOptions = {}): Promise<number> {
  const createScorer = options.createScorer ?? oracleScorer;
  let scorer: Scorer | null = null;
  let finished = false;

  const write = (response: Response) => {
    output.write(encodeResponse(response) + "\n");
  };

  return new Promise((resolve) => {
    const rl = readline.createInterface({ input, terminal: false });

    rl.on("line", (line) => {
      if (finished || line.trim().length === 0) {
        return;
      }
      const request = parseRequestLine(line);
      if (request === null) {
        write({ kind: "error", id: -1, message: "malformed request line" });
        return;
      }
      switch (request.type) {
        case "hello": {
          try {
            scorer = createScorer(request.config ?? {});
          } catch (err) {
            write({ kind: "error", id: request.id, message: `invalid config: ${(err as Error).message}` });
            return;
          }
          write({ kind: "hello_ok", id: request.id, version: PROTOCOL_VERSION });
          return;
        }
        case "shutdown": {
          write({ kind: "hello_ok", id: request.id });
          finished = true;
          rl.close();
          return;
        }
        case "baseline":
        case "evaluate": {
          if (scorer === null) {
            write({ kind: "error", id: request.id, message: "hello required before scoring" });
            return;
          }
          let policy: WireOperation[];
          if (request.type === "baseline") {
            policy = [];
          } else if (Array.isArray(request.policy)) {
            try {
              policy = request.policy.map((raw, i) => parseOperation(raw, `policy[${i}]`));
            } catch (err) {
              write({ kind: "error", id: request.id, message: `bad policy: ${(err as Error).message}` });
              return;
            }
          } else {
            write({ kind: "error", id: request.id, message: "evaluate request missing policy" });
            return;
          }
          try {
            write({ kind: "score", id: request.id, score: scorer(policy) });
          } catch (err) {
            write({ kind: "error", id: request.id, message: `scoring failed: ${(err as Error).message}` });
          }
          return;
        }
        default:
          write({ kind: "error", id: request.id, message: `unknown request type: ${request.type}` });
      }
    });

    rl.on("close", () => {
      resolve(finished ? 0 : 1);
    });
  });
}
