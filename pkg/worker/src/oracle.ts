/**
 * Closed-form scoring oracle delivered in the hello config.
 *
 * score(P) = base - sum(weight of op in P) - sum(interaction, both ends in P)
 *
 * Weight entries are summed in listed order, then interaction entries in
 * listed order, accumulating left to right in doubles, so the engine's
 * in-process oracle and this worker agree bit-for-bit. A harmless_depth entry
 * forces weight 0 for its group/module at all layers >= the threshold.
 */

export type ModuleName = "mha_out" | "mha_in" | "mlp";

export interface WireOperation {
  group: string;
  layer: number;
  module: ModuleName;
}

export interface OracleSpec {
  base: number;
  weights: Array<{ op: WireOperation; weight: number }>;
  interactions: Array<{ a: WireOperation; b: WireOperation; weight: number }>;
  harmlessDepth: Array<{ group: string; module: ModuleName; layer: number }>;
}

const MODULE_NAMES: ReadonlySet<string> = new Set(["mha_out", "mha_in", "mlp"]);

function parseOperation(raw: unknown, where: string): WireOperation {
  if (typeof raw !== "object" || raw === null) {
    throw new Error(`${where}: expected an operation object`);
  }
  const op = raw as Record<string, unknown>;
  if (typeof op.group !== "string" || op.group.length === 0) {
    throw new Error(`${where}: bad group`);
  }
  if (typeof op.layer !== "number" || !Number.isInteger(op.layer)) {
    throw new Error(`${where}: bad layer`);
  }
  if (typeof op.module !== "string" || !MODULE_NAMES.has(op.module)) {
    throw new Error(`${where}: bad module`);
  }
  return { group: op.group, layer: op.layer, module: op.module as ModuleName };
}

function parseWeight(raw: unknown, where: string): number {
  if (typeof raw !== "number" || !Number.isFinite(raw)) {
    throw new Error(`${where}: bad weight`);
  }
  return raw;
}

export function parseOracleSpec(config: unknown): OracleSpec {
  if (typeof config !== "object" || config === null) {
    throw new Error("config: expected an object");
  }
  const data = config as Record<string, unknown>;
  if (typeof data.base !== "number" || !Number.isFinite(data.base)) {
    throw new Error("config.base: expected a finite number");
  }
  const weights = [];
  for (const [i, raw] of ((data.weights as unknown[]) ?? []).entries()) {
    const entry = raw as Record<string, unknown>;
    weights.push({
      op: parseOperation(entry.op, `config.weights[${i}].op`),
      weight: parseWeight(entry.weight, `config.weights[${i}].weight`),
    });
  }
  const interactions = [];
  for (const [i, raw] of ((data.interactions as unknown[]) ?? []).entries()) {
    const entry = raw as Record<string, unknown>;
    interactions.push({
      a: parseOperation(entry.a, `config.interactions[${i}].a`),
      b: parseOperation(entry.b, `config.interactions[${i}].b`),
      weight: parseWeight(entry.weight, `config.interactions[${i}].weight`),
    });
  }
  const harmlessDepth = [];
  for (const [i, raw] of ((data.harmless_depth as unknown[]) ?? []).entries()) {
    const entry = raw as Record<string, unknown>;
    if (typeof entry.group !== "string") {
      throw new Error(`config.harmless_depth[${i}].group: bad group`);
    }
    if (typeof entry.module !== "string" || !MODULE_NAMES.has(entry.module)) {
      throw new Error(`config.harmless_depth[${i}].module: bad module`);
    }
    if (typeof entry.layer !== "number" || !Number.isInteger(entry.layer)) {
      throw new Error(`config.harmless_depth[${i}].layer: bad layer`);
    }
    harmlessDepth.push({
      group: entry.group,
      module: entry.module as ModuleName,
      layer: entry.layer,
    });
  }
  return { base: data.base, weights, interactions, harmlessDepth };
}

export function operationKey(op: WireOperation): string {
  return `${op.group}\u0000${op.layer}\u0000${op.module}`;
}

function effectiveWeight(spec: OracleSpec, op: WireOperation, weight: number): number {
  for (const entry of spec.harmlessDepth) {
    if (entry.group === op.group && entry.module === op.module && op.layer >= entry.layer) {
      return 0;
    }
  }
  return weight;
}

export function scorePolicy(spec: OracleSpec, policy: WireOperation[]): number {
  const pruned = new Set(policy.map(operationKey));
  let score = spec.base;
  for (const { op, weight } of spec.weights) {
    if (pruned.has(operationKey(op))) {
      score -= effectiveWeight(spec, op, weight);
    }
  }
  for (const { a, b, weight } of spec.interactions) {
    if (pruned.has(operationKey(a)) && pruned.has(operationKey(b))) {
      score -= weight;
    }
  }
  return score;
}

/** The pluggable scoring surface: a real model harness replaces this. */
export type Scorer = (policy: WireOperation[]) => number;

export function oracleScorer(config: unknown): Scorer {
  const spec = parseOracleSpec(config);
  return (policy) => scorePolicy(spec, policy);
}

export { parseOperation };
