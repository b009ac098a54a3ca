"""Reference denoiser processes for the plug-and-play solver.

Run as ``python -m mirrordeconv.denoisers --mode MODE``.  The process
reads ``DENOISE sigma=<float>\\n`` followed by one PFM image from stdin
and writes one PFM image to stdout, repeating until stdin closes.

Useful modes:

    echo     return the input unchanged (pnp degenerates to plain
             gradient descent; handy as a reference point)
    smooth   Gaussian smoothing whose width follows the requested sigma

Hostile modes, kept for exercising client-side error handling:

    wrong_size   replies with a 4x4 image regardless of the input
    garbage      replies with bytes that are not a PFM
    hang         reads the request, then never replies
    quit         reads the request, then exits with status 3
"""

import argparse
import re
import sys
import time

import numpy as np
from scipy.ndimage import gaussian_filter

from .imgio import decode_pfm, encode_pfm

MODES = ("echo", "smooth", "wrong_size", "garbage", "hang", "quit")

_REQUEST = re.compile(rb"^DENOISE sigma=([-+0-9.eE]+)\s*$")


def _smooth(img, sigma):
    # map the noise level to a blur width; clamp so tiny sigmas still
    # denoise a little and huge ones do not erase the image
    width = min(3.0, max(0.2, 40.0 * sigma))
    return gaussian_filter(img, width, mode="nearest")


def serve(mode, stream_in=None, stream_out=None):
    fin = stream_in if stream_in is not None else sys.stdin.buffer
    fout = stream_out if stream_out is not None else sys.stdout.buffer
    while True:
        line = fin.readline()
        if not line:
            return 0
        m = _REQUEST.match(line)
        if m is None:
            sys.stderr.write(f"denoiser: bad request line {line!r}\n")
            return 2
        sigma = float(m.group(1))
        img = decode_pfm(fin)
        if mode == "hang":
            while True:
                time.sleep(60.0)
        if mode == "quit":
            return 3
        if mode == "garbage":
            fout.write(b"this is not an image\n")
            fout.flush()
            continue
        if mode == "wrong_size":
            out = np.zeros((4, 4))
        elif mode == "smooth":
            out = _smooth(img, sigma)
        else:
            out = img
        fout.write(encode_pfm(out))
        fout.flush()


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mirrordeconv.denoisers",
        description="stdin/stdout denoiser for the pnp solver")
    parser.add_argument("--mode", choices=MODES, default="echo")
    args = parser.parse_args(argv)
    return serve(args.mode)


if __name__ == "__main__":
    sys.exit(main())
