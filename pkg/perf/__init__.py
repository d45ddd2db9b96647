from .cpu_profile import CpuProfile
