#!/usr/bin/env python3
"""Convert a TrueType font into a GATL glyph atlas for the renderer.

Usage: make_font_atlas.py FONT.ttf OUT.gatl [--size 10]
"""
import argparse
import struct

from PIL import Image, ImageDraw, ImageFont


def glyph_record(font, cp, ascent):
    ch = chr(cp)
    advance = max(1, round(font.getlength(ch)))
    left, top, right, bottom = font.getbbox(ch, anchor="ls")
    w, h = max(0, right - left), max(0, bottom - top)
    cov = b""
    if w > 0 and h > 0:
        img = Image.new("L", (w, h), 0)
        ImageDraw.Draw(img).text((-left, -top), ch, font=font, fill=255, anchor="ls")
        cov = img.tobytes()
    # bearing_y is measured upward from the baseline to the top row
    return struct.pack("<IHHhhH", cp, w, h, left, -top, advance) + cov


def fallback_record(width, height, ascent):
    cov = bytearray(width * height)
    for y in range(height):
        for x in range(width):
            if x in (0, width - 1) or y in (0, height - 1):
                cov[y * width + x] = 255
    return struct.pack("<IHHhhH", 0xFFFFFFFF, width, height, 0, ascent, width + 1) + bytes(cov)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("font")
    ap.add_argument("out")
    ap.add_argument("--size", type=int, default=10)
    args = ap.parse_args()

    font = ImageFont.truetype(args.font, args.size)
    ascent, descent = font.getmetrics()
    records = [glyph_record(font, cp, ascent) for cp in range(0x20, 0x7F)]
    records.append(fallback_record(max(3, args.size // 2), ascent, ascent))
    with open(args.out, "wb") as f:
        f.write(b"GATL" + struct.pack("<HHHI", 1, ascent, descent, len(records)))
        for r in records:
            f.write(r)


if __name__ == "__main__":
    main()
