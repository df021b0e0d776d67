# %% [markdown]
# # One key exchange across the reference network
#
# Alice sits on user node n1 and Bob on n15. Between them are two access
# nodes (n2, n14) and eleven carrier nodes. We ask for one 256-bit key and
# follow it through the system.

# %%
from qkdn.audit import kma_bits_spent, one_time_use
from qkdn.config import reference_config
from qkdn.network import Network
from qkdn.transport import TraceWriter

cfg = reference_config()
net = Network(cfg, trace=TraceWriter(level="full", keep=True))
net.prefill(1 << 18)
print(len(net.nodes), "nodes,", len(net.links), "links,", len(net.registry), "channels")

# %% [markdown]
# Run the exchange. The master SAE gets its key first, tells the slave out of
# band, and the slave fetches the same key from its own UKMS.

# %%
rec = net.run_exchange("SAE:alice", "SAE:bob")
print("ok:", rec.ok, " t_key:", round(rec.t_key, 4), "s")
key_id, key = rec.keys_master[0]
print("key", key_id, key.hex()[:16] + "...")
assert rec.keys_master == rec.keys_slave

# %% [markdown]
# The controller picked a path over the carrier nodes. The relay session key
# travels hop by hop along it, re-encrypted with each link's own key pool.

# %%
print(" -> ".join(net.controller.paths_view()[-1]["path"]))
relays = [r for r in net.trace.records if r["event"] == "send" and r["kind"] == "QBN_RELAY"]
print(len(relays), "relay messages")

# %% [markdown]
# Key-pool spending: one 256-bit session key for each GCM user leg and 384 bits
# for each OTP leg (12 carrier hops plus the access-to-access leg).

# %%
print("bits spent:", kma_bits_spent(net.all_stores()))
print("reused fragments:", one_time_use(net.all_stores()).reused)
