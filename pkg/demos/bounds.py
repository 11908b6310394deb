"""Compare the periodogram of a student with the two interval estimates.

``lower``/``upper`` come from squared-error sums and can exclude the true
value; the norm-form interval uses the triangle inequality on residual norms
and always contains it. ``python demos/bounds.py``.
"""
from spectral_watermark.harness import DESK_FILTER, Experiment, ExperimentParams, verify_bound

eps = 0.1
exp = Experiment(ExperimentParams(seed=4, watermarked=1, unwatermarked=3, students_per=1))
teacher = exp.watermarked_teachers(eps)[0]
key = exp.world.keys[0]
q = exp.world.queries

print(f"{'N':>2} {'f/f_w':>5} {'P_D':>9} {'lower':>9} {'upper':>9} {'norm lo':>9} {'norm hi':>9}")
for N in (1, 2, 4):
    members = [teacher] + exp.plain_members(N, 0)
    student = exp.distill_students([members], f"demo/N{N}", "kl")[0][0]
    for r in (1.0, 0.5, 2.0):
        rep = verify_bound(teacher, members[1:], student, q.features, r * key.frequency, key,
                           DESK_FILTER, q.labels == key.target_class, check=None)
        flag = "" if rep.holds else "  <- outside"
        print(f"{N:>2} {r:5.1f} {rep.p_d:9.4f} {rep.lower:9.4f} {rep.upper:9.4f} "
              f"{rep.lower_corrected:9.4f} {rep.upper_corrected:9.4f}{flag}")
