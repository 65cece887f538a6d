"""Network-facing bridges: OSC over UDP, JSON over WebSocket, MIDI."""
