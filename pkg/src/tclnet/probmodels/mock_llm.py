"""In-repo mock of the next-token HTTP provider.

Modes:
  uniform  equal log-probabilities over all 256 byte values
  fm-echo  the log of a given marginal, independent of context
  markov   rows of a transition matrix indexed by the last context byte
  oob      all mass on byte 255, outside any alphabet smaller than 8 bits

Run standalone with ``python3 -m tclnet.probmodels.mock_llm --mode uniform``.
"""
from __future__ import annotations

import argparse
import base64
import math

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

MODES = ("uniform", "fm-echo", "markov", "oob")


class NextTokenRequest(BaseModel):
    prompt: str
    context_bytes: str
    alphabet_bits: int


def _table(p) -> dict[str, float]:
    return {str(i): (math.log(float(v)) if v > 0 else -1e30) for i, v in enumerate(p)}


def create_app(mode: str = "uniform", pi=None, transition=None, initial=None) -> FastAPI:
    if mode not in MODES:
        raise ValueError(f"unknown mock mode {mode!r}")
    if mode == "fm-echo" and pi is None:
        raise ValueError("fm-echo needs pi")
    if mode == "markov" and transition is None:
        raise ValueError("markov needs a transition matrix")
    app = FastAPI(title="tclnet mock next-token provider")
    app.state.calls = 0
    if transition is not None:
        transition = np.asarray(transition, dtype=np.float64)
        initial = np.full(len(transition), 1.0 / len(transition)) if initial is None else np.asarray(initial, np.float64)

    @app.post("/v1/next_token")
    def next_token(req: NextTokenRequest) -> dict:
        app.state.calls += 1
        try:
            context = base64.b64decode(req.context_bytes, validate=True)
        except ValueError:
            raise HTTPException(status_code=400, detail="context_bytes is not base64") from None
        if mode == "uniform":
            return {"logprobs": {str(i): -math.log(256.0) for i in range(256)}}
        if mode == "oob":
            return {"logprobs": {"255": 0.0}}
        if mode == "fm-echo":
            return {"logprobs": _table(pi)}
        row = initial if not context else transition[context[-1] % len(transition)]
        return {"logprobs": _table(row)}

    return app


def main(argv=None) -> None:
    import uvicorn

    parser = argparse.ArgumentParser(description="mock next-token provider")
    parser.add_argument("--mode", choices=["uniform", "oob"], default="uniform")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8765)
    args = parser.parse_args(argv)
    uvicorn.run(create_app(args.mode), host=args.host, port=args.port, log_level="warning")


if __name__ == "__main__":
    main()
