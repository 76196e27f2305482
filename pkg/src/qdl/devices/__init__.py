"""Device models of the bundled microgrid."""

from .microgrid import BUSES, CABLES, build_netlist, build_system, flat_start, get_param, set_param
from .models import (DqValue, SingularCouplingError, exciter_rates, field_voltage_base,
                     governor_torque, induction_machine_rates, rectifier_coupling,
                     switching_functions, sync_machine_constants, sync_machine_rates)
from .params import (OMEGA_S, V_BASE_LL, BusParams, CableParams, ExciterParams, GovernorParams,
                     InductionMachineParams, MicrogridParams, QuantaParams, RectifierParams,
                     RLLoadParams, SyncMachineParams)

__all__ = [
    "BUSES", "CABLES", "OMEGA_S", "V_BASE_LL", "BusParams", "CableParams", "DqValue",
    "ExciterParams", "GovernorParams", "InductionMachineParams", "MicrogridParams",
    "QuantaParams", "RLLoadParams", "RectifierParams", "SingularCouplingError",
    "SyncMachineParams", "build_netlist", "build_system", "exciter_rates", "field_voltage_base",
    "flat_start", "get_param", "governor_torque", "induction_machine_rates", "rectifier_coupling",
    "set_param", "switching_functions", "sync_machine_constants", "sync_machine_rates",
]
