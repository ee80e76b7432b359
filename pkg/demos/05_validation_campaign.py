#!/usr/bin/env python3
# The randomized validation protocol in miniature: generated programs must
# reproduce the reference permutation bitwise on every drawn case.

from vecperm.cli import run_campaign

summary = run_campaign(cases=200, max_rank=16, seed=7, progress=50)
print(f"\n{summary['passed']}/{summary['cases']} exact matches")
print("family mix:", summary["per_family"])
print("complexity audits within the cap:", summary["audits_within_bound"])
assert not summary["mismatches"]

# The same campaign drives the command line:  vecperm check --cases 1000
