import pytest

from nanonnl import ExecutionContext, ParameterRegistry, registry_scope, set_default_context


@pytest.fixture(autouse=True)
def fresh_session():
    """Every test runs with a default context and an isolated registry."""
    set_default_context(ExecutionContext())
    with registry_scope(ParameterRegistry(seed=0)) as registry:
        yield registry
    set_default_context(ExecutionContext())


@pytest.fixture
def registry(fresh_session):
    return fresh_session
