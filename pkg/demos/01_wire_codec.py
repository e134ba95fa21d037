#!/usr/bin/env python3
"""Walk through the frame codec: build a request, frame it, decode it.

Run: python demos/01_wire_codec.py
"""

import io

from ice.wire import FrameDecoder, Message, decode_frame, encode_frame


def main() -> None:
    request = Message.request(
        "demo-001",
        "u200.microscope",
        "set_probe_position",
        {"x": 0.3, "y": 0.7},
        principal="ops",
    )
    frame = encode_frame(request)
    print("request:", request)
    print(f"frame length: {len(frame)} bytes "
          f"(4-byte big-endian prefix declares {int.from_bytes(frame[:4], 'big')})")
    print("payload (canonical JSON):")
    print(" ", frame[4:].decode())

    decoded = decode_frame(io.BytesIO(frame))
    print("roundtrip equal:", decoded == request)

    print("\nfeeding the same frame one byte at a time through FrameDecoder:")
    decoder = FrameDecoder()
    messages = []
    for i in range(len(frame)):
        messages.extend(decoder.feed(frame[i : i + 1]))
    print("  messages out:", len(messages), "| equal:", messages[0] == request)

    response = Message.ok("demo-001", {"accepted": True}, principal="ops")
    print("\nresponse frame payload:")
    print(" ", encode_frame(response)[4:].decode())


if __name__ == "__main__":
    main()
