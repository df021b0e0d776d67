# %% [markdown]
# # Losing a link
#
# Link 7-8 fails. A standby route through node 16 is brought up, then that
# fails too. The controller reacts to status updates from the carrier nodes.

# %%
from qkdn.config import reference_config
from qkdn.network import Network

net = Network(reference_config())
net.prefill(1 << 18)


def attempt(label):
    rec = net.run_exchange("SAE:alice", "SAE:bob")
    path = net.controller.paths_view()[-1]["path"] if rec.ok else []
    print(f"{label:>8}: ok={rec.ok} reason={rec.reason or '-'} "
          f"path={' '.join(p.split(':')[1] for p in path)}")


attempt("intact")

# %%
net.set_link_state("7-8", "DOWN")
for link_id in ("7-16", "16-8"):
    net.set_link_state(link_id, "UP")
net.advance(1.0)
attempt("bypass")

# %%
for link_id in ("7-16", "16-8"):
    net.set_link_state(link_id, "DOWN")
net.advance(1.0)
attempt("isolated")

# %% [markdown]
# The manager saw every state change; LINK_DOWN alarms are also forwarded to
# the controller.

# %%
for alarm in net.manager.alarms:
    print(alarm.to_dict())
