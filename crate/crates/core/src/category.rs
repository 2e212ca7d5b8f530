use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Garment category. Dress Code partitions everything by these three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Upper,
    Lower,
    Full,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Upper, Category::Lower, Category::Full];

    /// Code used in the binary index file.
    pub fn code(self) -> u8 {
        match self {
            Category::Upper => 0,
            Category::Lower => 1,
            Category::Full => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Category::Upper),
            1 => Some(Category::Lower),
            2 => Some(Category::Full),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Upper => "upper",
            Category::Lower => "lower",
            Category::Full => "full",
        }
    }

    /// Directory name in the Dress Code layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Category::Upper => "upper_body",
            Category::Lower => "lower_body",
            Category::Full => "dresses",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "upper" | "upper_body" => Ok(Category::Upper),
            "lower" | "lower_body" => Ok(Category::Lower),
            "full" | "dresses" => Ok(Category::Full),
            other => Err(Error::Data(format!("unknown category `{other}`"))),
        }
    }
}
