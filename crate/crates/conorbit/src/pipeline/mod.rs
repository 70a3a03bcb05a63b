//! Stage orchestration for the homotopy start-up chain.
