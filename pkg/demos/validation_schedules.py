"""
Testing every link of a communicator in a few passes
====================================================

Once a communication group is suspected, each of its links gets a
point-to-point benchmark. Pairs in one pass share no rank, so a pass runs
in parallel; rings need 2 or 3 passes and binary trees 4.
"""
# %%
# Rings
# -----
from failslow.locator import GroupProfile, classify_groups, localize, parse_tree, tree_schedule, ring_schedule

for n in (2, 4, 5, 8):
    s = ring_schedule(n)
    print(f"ring of {n}: {len(s)} passes, {len(s.pairs)} links")
print(ring_schedule(6).to_text())

# %%
# A binary tree
# -------------
tree = parse_tree("""
0 -
1 0
2 0
3 1
4 1
5 2
""")
print(tree_schedule(tree).to_text())

# %%
# From group profiles to a slow link
# ----------------------------------
# Group 2 moves its data 40% slower than the median, so only it is validated.
profiles = [GroupProfile(i, t) for i, t in enumerate([1.0, 1.02, 1.4, 0.99])]
print("suspicious groups:", classify_groups(profiles))
measured = {(0, 1): 0.010, (1, 2): 0.011, (2, 3): 0.052, (0, 3): 0.010}
loc = localize({}, measured)
print("located:", loc.links, "cause:", loc.kind)
