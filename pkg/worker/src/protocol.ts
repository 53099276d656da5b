/**
 * Wire framing for protocol v1: one JSON object per line, responses with
 * alphabetically ordered keys so sessions are reproducible byte-for-byte.
 */

export const PROTOCOL_VERSION = "1";

export type Response =
  | { kind: "hello_ok"; id: number; version?: string }
  | { kind: "score"; id: number; score: number }
  | { kind: "error"; id: number; message: string };

export function encodeResponse(response: Response): string {
  // object literals keep insertion order; fields are listed alphabetically
  switch (response.kind) {
    case "hello_ok":
      if (response.version !== undefined) {
        return JSON.stringify({ id: response.id, type: "hello_ok", version: response.version });
      }
      return JSON.stringify({ id: response.id, type: "hello_ok" });
    case "score":
      return JSON.stringify({ id: response.id, score: response.score, type: "score" });
    case "error":
      return JSON.stringify({ id: response.id, message: response.message, type: "error" });
  }
}

export interface ParsedRequest {
  id: number;
  type: string;
  policy?: unknown;
  config?: unknown;
}

export function parseRequestLine(line: string): ParsedRequest | null {
  let value: unknown;
  try {
    value = JSON.parse(line);
  } catch {
    return null;
  }
  if (typeof value !== "object" || value === null || Array.isArray(value)) {
    return null;
  }
  const record = value as Record<string, unknown>;
  if (typeof record.id !== "number" || !Number.isInteger(record.id)) {
    return null;
  }
  if (typeof record.type !== "string") {
    return null;
  }
  return {
    id: record.id,
    type: record.type,
    policy: record.policy,
    config: record.config,
  };
}
