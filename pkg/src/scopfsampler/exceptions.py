from typing import Optional

class ScopfError(Exception):
    def __init__(self, exit_code: int, detail: str = None, category: str = "error"):
        self.exit_code = exit_code
        self.category = category
        self.detail = detail or "An error occurred"
        super().__init__(self.detail)

    def one_line(self) -> str:
        """Machine-parsable single-line rendering used by the CLI"""
        detail = " ".join(self.detail.split())
        return f"error[{self.category}]: {detail}"

class ConfigurationError(ScopfError):
    def __init__(self, detail: str = "Configuration error"):
        super().__init__(2, detail, "config-invalid")

class ReportMismatchError(ConfigurationError):
    def __init__(self, detail: str = "Stress reports are not comparable"):
        super().__init__(detail)

class CaseParseError(ScopfError):
    def __init__(
        self,
        detail: str = "Case file could not be parsed",
        table: Optional[str] = None,
        row: Optional[int] = None,
        column: Optional[int] = None,
    ):
        self.table = table
        self.row = row
        self.column = column
        location = []
        if table:
            location.append(f"table {table}")
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column}")
        if location:
            detail = f"{detail} ({', '.join(location)})"
        super().__init__(3, detail, "case-parse")

class SolverError(ScopfError):
    def __init__(self, detail: str = "Solver error"):
        super().__init__(4, detail, "solver")

class SingularJacobianError(SolverError):
    def __init__(self, detail: str = "Jacobian is singular even after regularization"):
        super().__init__(detail)

class DispatchBoundsError(SolverError):
    def __init__(self, detail: str = "Dispatch is not strictly inside its box"):
        super().__init__(detail)

class BudgetMismatchError(SolverError):
    def __init__(self, detail: str = "Power-flow solve count differs from the budget ledger"):
        super().__init__(detail)

class OutputError(ScopfError):
    def __init__(self, detail: str = "Could not write output"):
        super().__init__(5, detail, "io")
