// Parser for the detector scenario corpus (same line format the server
// reads): `frame <id> <w> <h>` headers followed by detection lines.

export type CorpusDetection = {
  label: string;
  center: [number, number];
  bbox: [number, number, number, number];
  confidence: number;
};

export type CorpusFrame = {
  frameId: string;
  width: number;
  height: number;
  detections: CorpusDetection[];
};

export function parseFrameCorpus(text: string): Map<string, CorpusFrame> {
  const frames = new Map<string, CorpusFrame>();
  let current: CorpusFrame | null = null;
  for (const raw of text.split("\n")) {
    const line = raw.split("#", 1)[0].trim();
    if (!line) continue;
    const parts = line.split(/\s+/);
    if (parts[0] === "frame") {
      current = {
        frameId: parts[1],
        width: Number(parts[2]),
        height: Number(parts[3]),
        detections: [],
      };
      frames.set(current.frameId, current);
    } else if (current) {
      const n = parts.slice(1).map(Number);
      current.detections.push({
        label: parts[0],
        center: [n[0], n[1]],
        bbox: [n[2], n[3], n[4], n[5]],
        confidence: n[6],
      });
    }
  }
  return frames;
}
