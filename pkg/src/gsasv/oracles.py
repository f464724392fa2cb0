"""Slow, independent reference implementations used to cross-check the fast paths.

Kept deliberately naive: plain loops, no shared helpers with the code
they check.
"""
from __future__ import annotations


def eer_bruteforce(pos, neg) -> float:
    """EER in percent by sweeping a threshold through every gap between scores.

    Candidate thresholds are one value below the minimum, every midpoint
    between consecutive distinct scores, and one value above the maximum.
    At each, FRR and FAR are counted directly (accept iff score >= t); the
    first sign change of FRR - FAR is interpolated linearly.
    """
    pos = [float(s) for s in pos]
    neg = [float(s) for s in neg]
    values = sorted(set(pos) | set(neg))
    cands = [values[0] - 1.0]
    cands += [(values[i] + values[i + 1]) / 2.0 for i in range(len(values) - 1)]
    cands.append(values[-1] + 1.0)
    prev = None
    for t in cands:
        frr = sum(1 for s in pos if s < t) / len(pos)
        far = sum(1 for s in neg if s >= t) / len(neg)
        if frr >= far:
            if prev is None:
                return 100.0 * frr
            pfrr, pfar = prev
            a = pfrr - pfar
            b = frr - far
            w = a / (a - b)
            return 100.0 * (pfrr + w * (frr - pfrr))
        prev = (frr, far)
    raise AssertionError("unreachable: FRR reaches 1 and FAR reaches 0 at the top threshold")


def trials_bruteforce(records, ordered: bool = False) -> list[tuple[str, str, str]]:
    """Every trial implied by the pairing rules, found by testing all record pairs."""
    out = []
    for a in records:
        for b in records:
            if a.utt_id == b.utt_id or a.kind != "bonafide":
                continue
            if b.kind == "bonafide":
                if not ordered and not a.utt_id < b.utt_id:
                    continue
                label = "target" if a.speaker_id == b.speaker_id else "nontarget"
                out.append((a.utt_id, b.utt_id, label))
            elif a.speaker_id == b.speaker_id:
                out.append((a.utt_id, b.utt_id, "spoof"))
    return out
