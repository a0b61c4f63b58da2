"""Convert the MATPOWER IEEE 300-bus case into the canonical network format.

Offline helper, not part of the library.  Requires ``pypower`` (which ships
MATPOWER's case300)::

    pip install pypower
    python tools/make_ieee300.py src/supplybp/data/ieee300.json

Conventions
-----------
* one vertex per bus, id = bus number, in bus-table order;
* one link per branch; parallel branches between the same buses get
  increasing ``circuit`` labels so both survive validation;
* coefficient = 1/|x| (per unit, 100 MVA base).  Tap ratios and shunts are
  ignored, as usual in the DC approximation.  case300 has one series
  capacitor (negative reactance), which is stored by magnitude;
* vertex_value = bus voltage angle from the solved case, in rad;
* injection = DC-consistent net injection sum_j B_ij (theta_i - theta_j), p.u.
"""

import json
import sys

import numpy as np
from pypower.case300 import case300


def convert():
    case = case300()
    bus, branch = case["bus"], case["branch"]
    ids = [str(int(b)) for b in bus[:, 0]]
    theta = {i: float(np.deg2rad(va)) for i, va in zip(ids, bus[:, 8])}
    links, seen = [], {}
    inj = dict.fromkeys(ids, 0.0)
    for row in branch:
        if row[10] == 0:
            continue
        f, t = str(int(row[0])), str(int(row[1]))
        key = frozenset((f, t))
        seen[key] = seen.get(key, 0) + 1
        coeff = 1.0 / abs(float(row[3]))
        rec = {"from": f, "to": t, "coeff": coeff}
        if seen[key] > 1:
            rec["circuit"] = str(seen[key])
        links.append(rec)
        flow = coeff * (theta[f] - theta[t])
        inj[f] += flow
        inj[t] -= flow
    vertices = [{"id": i, "injection": inj[i], "vertex_value": theta[i]} for i in ids]
    return {"kind": "power_dc", "vertices": vertices, "links": links}


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "ieee300.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(convert(), fh, indent=1)
        fh.write("\n")
