//! The book under `book/src`, compiled so every snippet runs as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/identities.md")]
mod identities {}

#[doc = include_str!("../../../book/src/bloom-filters.md")]
mod bloom_filters {}

#[doc = include_str!("../../../book/src/control-numbers.md")]
mod control_numbers {}

#[doc = include_str!("../../../book/src/probabilistic-linkage.md")]
mod probabilistic_linkage {}

#[doc = include_str!("../../../book/src/cascade.md")]
mod cascade {}

#[doc = include_str!("../../../book/src/registry.md")]
mod registry {}

#[doc = include_str!("../../../book/src/trusted-third-party.md")]
mod trusted_third_party {}

#[doc = include_str!("../../../book/src/evaluation.md")]
mod evaluation {}

#[doc = include_str!("../../../book/src/service.md")]
mod service {}
