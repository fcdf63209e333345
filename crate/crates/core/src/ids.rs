//! Identifier newtypes.
//!
//! Every identifier below a document is prefixed with the document id
//! (`d3-a1`, `d3-th4`), so a bare id is enough to route a request to its
//! owning document.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Self {
                Self(value.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(value: &str) -> Self {
                Self(value.to_owned())
            }
        }
    };
}

string_id!(DocId);
string_id!(UserId);
string_id!(AgentId);
string_id!(TaskId);
string_id!(RunId);
string_id!(ThreadId);
string_id!(MessageId);
string_id!(AnnotationId);

/// Returns the document id embedded in a child identifier.
pub fn owning_doc(child: &str) -> DocId {
    DocId::new(child.split('-').next().unwrap_or(child))
}

/// Who authored a message or an event.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "lowercase")]
pub enum Identity {
    User(UserId),
    Agent(AgentId),
}

impl Identity {
    pub fn id(&self) -> &str {
        match self {
            Identity::User(u) => u.as_str(),
            Identity::Agent(a) => a.as_str(),
        }
    }

    pub fn as_user(&self) -> Option<&UserId> {
        match self {
            Identity::User(u) => Some(u),
            Identity::Agent(_) => None,
        }
    }
}

/// Monotonic per-document id allocator.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdAllocator {
    next: u64,
}

impl IdAllocator {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }

    pub fn next(&mut self, doc: &DocId, tag: &str) -> String {
        let n = self.next;
        self.next += 1;
        format!("{doc}-{tag}{n}")
    }
}
