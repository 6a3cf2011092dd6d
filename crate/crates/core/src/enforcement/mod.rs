//! Sequential budget enforcement: a durable FIFO queue of enforcement
//! messages, a single consumer applying the policy table to account
//! states, and the append-only breach record store.

mod accounts;
mod breach;
mod policy;
mod queue;

pub use accounts::{AccountBook, AccountEntry, EnforceError, EnforcementOutcome, Enforcer};
pub use breach::{BreachFilter, BreachRecord, BreachStore};
pub use policy::{EnforcementAction, EnforcementPolicy, PolicyError, PolicyRule};
pub use queue::{DurableQueue, EnqueueOutcome, JournalEntry, QueueHandle, DEFAULT_CAPACITY};
