# %% [markdown]
# # What may talk to what
#
# Every message passes a policy gate. Some component pairs can never talk:
# an access KMS must not reach the controller, and user-side components must
# not reach carrier nodes. This script runs a few exchanges, sends a set of
# forbidden probes and audits the resulting trace.

# %%
from qkdn.config import reference_config
from qkdn.harness import run_scenario

run = run_scenario(reference_config(), "POLICY_AUDIT")
for probe in run.report.audits["probes"]:
    print(f"{probe['from']:>12} -> {probe['to']:<14} {probe['kind']:<14} {probe['reason']}")

# %%
for name in ("ksa_containment", "topology_hiding", "flow_direction", "akms_controller",
             "demarcation"):
    print(f"{name:>16}: {len(run.report.audits[name])} violations")
