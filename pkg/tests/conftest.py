import os

# Pin BLAS threading before numpy is imported anywhere: the suite asserts
# bit-level reproducibility, and single-threaded kernels are also faster at
# these matrix sizes.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
