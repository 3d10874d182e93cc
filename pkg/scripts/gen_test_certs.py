"""Write a throwaway CA, server and client certificates for TLS experiments.

Also writes a client certificate from an unrelated CA, handy for checking
that the broker refuses it.  Needs the ``cryptography`` package.

    python3 scripts/gen_test_certs.py ./pki
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from helpers import generate_pki  # noqa: E402


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--client-cn", default="pilot-client")
    args = ap.parse_args()
    pki = generate_pki(args.out, client_cn=args.client_cn)
    for name, path in vars(pki).items():
        print(f"{name:12} {path}")


if __name__ == "__main__":
    main()
