"""
Reading county case files into a panel
======================================

Simulate a small state, write it out in the NYT layout, read it back and
look at the per-capita series and the treatment windows.
"""

import tempfile
from pathlib import Path

import numpy as np

from policyeval import period_mask, read_case_csv, to_rates
from policyeval.ingest import read_population_csv
from policyeval.simulate import simulate_did_panel, write_inputs

panel, spec = simulate_did_panel(n_units=6, seed=1)
tmp = Path(tempfile.mkdtemp())
paths = write_inputs(panel, tmp)
print(Path(paths["case_csv"]).read_text().splitlines()[:4])

# drop a day for one county and make another one dip, so repair has work to do
lines = Path(paths["case_csv"]).read_text().splitlines()
lines = [ln for ln in lines if not (ln.startswith("2020-04-10") and "County 03" in ln)]
lines = [ln.rsplit(",", 2)[0] + ",0,0"
         if ln.startswith("2020-04-20") and "County 02" in ln else ln for ln in lines]
Path(paths["case_csv"]).write_text("\n".join(lines) + "\n")

issues = []
pop = read_population_csv(paths["population_csv"])
back = read_case_csv(paths["case_csv"], "Arkansas", pop, repair="clamp", issues=issues)
print(back.unit_ids, back.cumulative_cases.shape)
for issue in issues[:5]:
    print(issue)

# rates per person; the windows come from the treatment definition
series = to_rates(back)
mask = period_mask(spec, back.dates)
labels, counts = np.unique(mask, return_counts=True)
print(dict(zip(labels, counts.tolist())))
treated = series[back.unit_ids.index("Treated")]
print("treated rate on the last pre day:", treated.rates[mask == "pre"][-1])
print("treatment window:", treated.window(spec.effective_start, spec.treatment_last_day).dates[0])
