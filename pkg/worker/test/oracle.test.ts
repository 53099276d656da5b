import { describe, expect, it } from "vitest";

import { oracleScorer, parseOracleSpec, scorePolicy, WireOperation } from "../src/oracle";

const op = (group: string, layer: number, module: WireOperation["module"]): WireOperation => ({
  group,
  layer,
  module,
});

const spec = parseOracleSpec({
  base: 97.3125,
  weights: [
    { op: op("b", 3, "mlp"), weight: 1.25 },
    { op: op("a", 2, "mha_out"), weight: 2.5 },
    { op: op("a", 5, "mha_in"), weight: 0.375 },
    { op: op("b", 7, "mlp"), weight: 9.0 },
  ],
  interactions: [{ a: op("a", 2, "mha_out"), b: op("b", 3, "mlp"), weight: 0.3125 }],
  harmless_depth: [{ group: "b", module: "mlp", layer: 6 }],
});

describe("oracle scoring", () => {
  it("scores the empty policy at base", () => {
    expect(scorePolicy(spec, [])).toBe(97.3125);
  });

  it("subtracts weights additively", () => {
    expect(scorePolicy(spec, [op("b", 3, "mlp")])).toBe(96.0625);
    expect(scorePolicy(spec, [op("a", 5, "mha_in")])).toBe(97.3125 - 0.375);
  });

  it("applies interactions when both ends are pruned", () => {
    expect(scorePolicy(spec, [op("b", 3, "mlp"), op("a", 2, "mha_out")])).toBe(93.25);
  });

  it("zeroes weights at and beyond the harmless depth", () => {
    expect(scorePolicy(spec, [op("b", 7, "mlp")])).toBe(97.3125);
  });

  it("ignores operations without listed weights", () => {
    expect(scorePolicy(spec, [op("z", 1, "mlp")])).toBe(97.3125);
  });

  it("rejects malformed configs", () => {
    expect(() => parseOracleSpec({ weights: [] })).toThrow(/base/);
    expect(() =>
      parseOracleSpec({ base: 1, weights: [{ op: { group: "g", layer: 1, module: "qkv" }, weight: 1 }] }),
    ).toThrow(/module/);
  });

  it("exposes the scorer factory used by serve()", () => {
    const scorer = oracleScorer({ base: 5.5 });
    expect(scorer([])).toBe(5.5);
  });
});
