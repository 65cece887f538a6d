// Optional WebMIDI input. Resolves false when the API is missing or denied.

type NoteHandler = (pitch: number, velocity: number) => void;

export async function initMidi(onNote: NoteHandler): Promise<boolean> {
  if (!("requestMIDIAccess" in navigator)) return false;
  try {
    const access = await (navigator as any).requestMIDIAccess();
    const attach = (input: any) => {
      input.onmidimessage = (msg: any) => {
        const [st, d1, d2] = msg.data;
        const kind = st & 0xf0;
        if (kind === 0x90) onNote(d1, d2); // vel 0 note-ons are offs
        else if (kind === 0x80) onNote(d1, 0);
      };
    };
    for (const input of access.inputs.values()) attach(input);
    access.onstatechange = (e: any) => {
      if (e.port.type === "input" && e.port.state === "connected") {
        attach(e.port);
      }
    };
    return true;
  } catch {
    return false;
  }
}
