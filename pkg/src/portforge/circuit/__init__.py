from .devices import diode_iv, shockley, thermal_voltage
from .mna import (NewtonConfig, StepSolution, SystemStencil, TransientResult, TransientSolver,
                  assemble_transient_system, solve_transient, solve_transient_batch)
from .netlist import (Capacitor, Diode, EMPort, Inductor, Netlist, Resistor, VoltageSource,
                      format_element, parse_netlist)

__all__ = [
    "Capacitor", "Diode", "EMPort", "Inductor", "Netlist", "NewtonConfig", "Resistor",
    "StepSolution", "SystemStencil", "TransientResult", "TransientSolver", "VoltageSource",
    "assemble_transient_system", "diode_iv", "format_element", "parse_netlist", "shockley",
    "solve_transient", "solve_transient_batch", "thermal_voltage",
]
